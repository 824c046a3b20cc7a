//! Session generation, per-servicer token budgets, and the payable relay
//! admission pipeline.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::primitives::{self, check_collision, hash_parts, Difficulty, Digest, Identity, KeyPair, Signature, Signer, Verifier};
use crate::smst::{SmstError, SumTrie};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SessionError {
    #[error("need {needed} eligible servicers, have {available}")]
    InsufficientServicers { needed: usize, available: usize },
    #[error("duplicate servicer {0} in eligible set")]
    DuplicateServicer(Identity),
    #[error("application stake is zero")]
    ZeroBudget,
    #[error("invalid session parameter: {0}")]
    InvalidArgument(&'static str),
}

/// Rate-limiting parameters shared by every session of a service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionParams {
    pub servicers_per_session: usize,
    /// Session length in blocks.
    pub window: u64,
    /// Tokens-to-relays multiplier.
    pub ttrm: u64,
    pub relay_accuracy: f64,
    pub app_stake: u64,
}

impl Default for SessionParams {
    fn default() -> Self {
        SessionParams {
            servicers_per_session: 12,
            window: 4,
            ttrm: 1000,
            relay_accuracy: 0.2,
            app_stake: 1_000_000,
        }
    }
}

impl SessionParams {
    pub fn validate(&self) -> Result<(), SessionError> {
        if self.servicers_per_session == 0 {
            return Err(SessionError::InvalidArgument("servicers_per_session must be positive"));
        }
        if self.window == 0 {
            return Err(SessionError::InvalidArgument("window must be positive"));
        }
        if self.ttrm == 0 {
            return Err(SessionError::InvalidArgument("ttrm must be positive"));
        }
        if !(self.relay_accuracy.is_finite() && self.relay_accuracy >= 0.0) {
            return Err(SessionError::InvalidArgument("relay_accuracy must be finite and >= 0"));
        }
        if self.app_stake == 0 {
            return Err(SessionError::ZeroBudget);
        }
        Ok(())
    }

    pub fn budget(&self) -> Result<TokenBudget, SessionError> {
        compute_budget(self.app_stake, self.ttrm, self.servicers_per_session, self.relay_accuracy)
    }

    /// First block of the session containing `height`.
    pub fn session_start(&self, height: u64) -> u64 {
        height - height % self.window
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenBudget {
    /// Token bucket size `b` for each servicer in a session.
    pub per_servicer: u64,
    pub app_stake: u64,
    pub ttrm: u64,
    pub servicers_per_session: usize,
    pub relay_accuracy: f64,
}

/// `b = floor((stake * ttrm / servicers) * (1 + accuracy))`.
pub fn compute_budget(
    app_stake: u64,
    ttrm: u64,
    servicers_per_session: usize,
    relay_accuracy: f64,
) -> Result<TokenBudget, SessionError> {
    if app_stake == 0 {
        return Err(SessionError::ZeroBudget);
    }
    if ttrm == 0 || servicers_per_session == 0 {
        return Err(SessionError::InvalidArgument("ttrm and servicers_per_session must be positive"));
    }
    if !(relay_accuracy.is_finite() && relay_accuracy >= 0.0) {
        return Err(SessionError::InvalidArgument("relay_accuracy must be finite and >= 0"));
    }
    let relays = app_stake as u128 * ttrm as u128;
    let per_servicer = if relay_accuracy == 0.0 {
        (relays / servicers_per_session as u128) as u64
    } else {
        (relays as f64 * (1.0 + relay_accuracy) / servicers_per_session as f64).floor() as u64
    };
    Ok(TokenBudget { per_servicer, app_stake, ttrm, servicers_per_session, relay_accuracy })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub app: Identity,
    pub service: Identity,
    pub start_height: u64,
    /// Exclusive.
    pub end_height: u64,
    pub servicers: Vec<Identity>,
    pub seed: Digest,
}

impl SessionHeader {
    pub fn contains_height(&self, height: u64) -> bool {
        (self.start_height..self.end_height).contains(&height)
    }

    pub fn includes(&self, servicer: &Identity) -> bool {
        self.servicers.contains(servicer)
    }
}

/// Samples the session's servicers without replacement from a generator
/// keyed by `H(block_hash || app || service)`.
pub fn new_session(
    block_hash: &Digest,
    app: &Identity,
    service: &Identity,
    eligible: &[Identity],
    servicers_per_session: usize,
    start_height: u64,
    window: u64,
) -> Result<SessionHeader, SessionError> {
    if servicers_per_session == 0 || window == 0 {
        return Err(SessionError::InvalidArgument("servicers_per_session and window must be positive"));
    }
    if eligible.len() < servicers_per_session {
        return Err(SessionError::InsufficientServicers {
            needed: servicers_per_session,
            available: eligible.len(),
        });
    }
    let mut seen = HashSet::with_capacity(eligible.len());
    for s in eligible {
        if !seen.insert(s) {
            return Err(SessionError::DuplicateServicer(s.clone()));
        }
    }
    let seed = hash_parts(&[
        b"relay-mining/session/v1",
        &block_hash.0,
        &(app.0.len() as u64).to_be_bytes(),
        app.0.as_bytes(),
        service.0.as_bytes(),
    ]);
    let mut rng = ChaCha8Rng::from_seed(seed.0);
    let servicers = rand::seq::index::sample(&mut rng, eligible.len(), servicers_per_session)
        .into_iter()
        .map(|i| eligible[i].clone())
        .collect();
    Ok(SessionHeader {
        app: app.clone(),
        service: service.clone(),
        start_height,
        end_height: start_height + window,
        servicers,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayRequest {
    pub app: Identity,
    pub service: Identity,
    pub session_seed: Digest,
    pub session_start: u64,
    pub servicer: Identity,
    pub height: u64,
    pub payload: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedRequest {
    pub request: RelayRequest,
    pub signature: Signature,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayResponse {
    pub servicer: Identity,
    pub request_hash: Digest,
    pub payload: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedResponse {
    pub response: RelayResponse,
    pub signature: Signature,
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("relay types serialize infallibly")
}

impl RelayRequest {
    pub fn to_bytes(&self) -> Vec<u8> {
        to_json(self)
    }

    pub fn sign(self, app_key: &KeyPair) -> SignedRequest {
        let signature = app_key.sign(&self.to_bytes());
        SignedRequest { request: self, signature }
    }
}

impl SignedRequest {
    pub fn to_bytes(&self) -> Vec<u8> {
        to_json(self)
    }

    pub fn verify(&self, verifier: &dyn Verifier) -> bool {
        verifier.verify(&self.request.app, &self.request.to_bytes(), &self.signature)
    }
}

impl RelayResponse {
    pub fn to_bytes(&self) -> Vec<u8> {
        to_json(self)
    }
}

impl SignedResponse {
    pub fn to_bytes(&self) -> Vec<u8> {
        to_json(self)
    }

    pub fn verify(&self, verifier: &dyn Verifier) -> bool {
        verifier.verify(&self.response.servicer, &self.response.to_bytes(), &self.signature)
    }
}

/// A served relay: the unit of work, keyed in the trie by its digest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relay {
    pub request: SignedRequest,
    pub response: SignedResponse,
}

impl Relay {
    pub fn digest(&self) -> Digest {
        primitives::digest(&self.request.to_bytes(), &self.response.to_bytes())
            .expect("serialized relay halves are never empty")
    }

    /// Trie leaf value.
    pub fn to_bytes(&self) -> Vec<u8> {
        to_json(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Relay> {
        serde_json::from_slice(bytes).ok()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnpayableReason {
    WrongSession,
    WrongServicer,
    ServicerNotInSession,
    OutsideWindow,
    SessionClosed,
    Replayed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RelayOutcome {
    RejectedInvalid,
    RejectedUnpayable(UnpayableReason),
    RejectedExhausted,
    ServedNoCollision { digest: Digest },
    ServedAndInserted { digest: Digest },
}

impl RelayOutcome {
    pub fn is_inserted(&self) -> bool {
        matches!(self, RelayOutcome::ServedAndInserted { .. })
    }

    pub fn is_served(&self) -> bool {
        matches!(self, RelayOutcome::ServedNoCollision { .. } | RelayOutcome::ServedAndInserted { .. })
    }
}

/// One servicer's state for one session: its token bucket and relay trie.
pub struct ServicerSession {
    key: KeyPair,
    header: SessionHeader,
    budget: u64,
    token_count: u64,
    trie: SumTrie,
    frozen: bool,
}

impl ServicerSession {
    pub fn new(key: KeyPair, header: SessionHeader, budget: &TokenBudget, key_bits: usize) -> Result<Self, SmstError> {
        Ok(ServicerSession {
            key,
            header,
            budget: budget.per_servicer,
            token_count: budget.per_servicer,
            trie: SumTrie::new(key_bits)?,
            frozen: false,
        })
    }

    pub fn id(&self) -> &Identity {
        self.key.id()
    }

    pub fn header(&self) -> &SessionHeader {
        &self.header
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn token_count(&self) -> u64 {
        self.token_count
    }

    pub fn trie(&self) -> &SumTrie {
        &self.trie
    }

    /// Mutable access for fault-injection tests.
    #[doc(hidden)]
    pub fn trie_mut(&mut self) -> &mut SumTrie {
        &mut self.trie
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Stops accepting relays; done when the claim is submitted.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Serves the request. Deterministic, so the response is reproducible.
    pub fn respond(&self, request: &SignedRequest) -> SignedResponse {
        let request_hash = hash_parts(&[b"relay-mining/request/v1", &request.to_bytes()]);
        let response = RelayResponse {
            servicer: self.key.id().clone(),
            request_hash,
            payload: format!("result:{}", hex::encode(&request_hash.0[..8])),
        };
        let signature = self.key.sign(&response.to_bytes());
        SignedResponse { response, signature }
    }

    fn payability(&self, request: &RelayRequest) -> Result<(), UnpayableReason> {
        let h = &self.header;
        if self.frozen {
            return Err(UnpayableReason::SessionClosed);
        }
        if request.app != h.app
            || request.service != h.service
            || request.session_seed != h.seed
            || request.session_start != h.start_height
        {
            return Err(UnpayableReason::WrongSession);
        }
        if request.servicer != *self.key.id() {
            return Err(UnpayableReason::WrongServicer);
        }
        if !h.includes(&request.servicer) {
            return Err(UnpayableReason::ServicerNotInSession);
        }
        if !h.contains_height(request.height) {
            return Err(UnpayableReason::OutsideWindow);
        }
        Ok(())
    }

    /// Admission pipeline: signature, payability, token bucket, serve, and
    /// on a hash collision spend one token and commit the relay to the trie.
    pub fn handle_relay(
        &mut self,
        request: &SignedRequest,
        verifier: &dyn Verifier,
        difficulty: &Difficulty,
    ) -> RelayOutcome {
        if !request.verify(verifier) {
            return RelayOutcome::RejectedInvalid;
        }
        if let Err(reason) = self.payability(&request.request) {
            return RelayOutcome::RejectedUnpayable(reason);
        }
        if self.token_count == 0 {
            return RelayOutcome::RejectedExhausted;
        }
        let relay = Relay { request: request.clone(), response: self.respond(request) };
        let digest = relay.digest();
        if !check_collision(&digest, difficulty) {
            return RelayOutcome::ServedNoCollision { digest };
        }
        match self.trie.insert(&digest, &relay.to_bytes()) {
            Ok(_) => {
                self.token_count -= 1;
                RelayOutcome::ServedAndInserted { digest }
            }
            Err(_) => RelayOutcome::RejectedUnpayable(UnpayableReason::Replayed),
        }
    }
}
