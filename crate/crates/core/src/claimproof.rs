//! Commit-and-reveal settlement for one (servicer, session): claim, challenge
//! derived from a later block hash, closest-leaf proof reveal, verification,
//! and the mint/burn ledger.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::primitives::{hash_parts, Digest, Identity, Verifier};
use crate::session::{Relay, ServicerSession};
use crate::smst::{self, MembershipProof, SumHash};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimProofParams {
    pub claim_window: u64,
    pub proof_window: u64,
    /// Tokens per claimed relay at p = 1; scaled by 1/p at settlement.
    pub reward_rate: f64,
    #[serde(default = "default_key_bits")]
    pub key_bits: usize,
}

fn default_key_bits() -> usize {
    smst::MAX_KEY_BITS
}

impl Default for ClaimProofParams {
    fn default() -> Self {
        ClaimProofParams { claim_window: 4, proof_window: 4, reward_rate: 1.0, key_bits: default_key_bits() }
    }
}

impl ClaimProofParams {
    pub fn validate(&self) -> Result<(), ClaimError> {
        if self.claim_window == 0 || self.proof_window == 0 {
            return Err(ClaimError::InvalidParams("claim_window and proof_window must be positive"));
        }
        if !(self.reward_rate.is_finite() && self.reward_rate >= 0.0) {
            return Err(ClaimError::InvalidParams("reward_rate must be finite and >= 0"));
        }
        if !(1..=smst::MAX_KEY_BITS).contains(&self.key_bits) {
            return Err(ClaimError::InvalidParams("key_bits must lie in 1..=256"));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClaimError {
    #[error("height {height} outside claim window [{start}, {end})")]
    WindowViolation { height: u64, start: u64, end: u64 },
    #[error("claim already submitted for this servicer and session")]
    DuplicateClaim,
    #[error("challenge block {challenge} is not after claim height {claim}")]
    OrderingViolation { claim: u64, challenge: u64 },
    #[error("height {height} outside proof window [{start}, {end})")]
    ProofWindowViolation { height: u64, start: u64, end: u64 },
    #[error("unknown claim {0}")]
    UnknownClaim(Digest),
    #[error("claim is {found}, operation needs {expected}")]
    InvalidState { expected: &'static str, found: &'static str },
    #[error("invalid claim/proof parameter: {0}")]
    InvalidParams(&'static str),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub id: Digest,
    pub servicer: Identity,
    pub app: Identity,
    pub service: Identity,
    pub session_seed: Digest,
    pub session_start: u64,
    pub session_end: u64,
    pub root: SumHash,
    pub claim_height: u64,
    pub key_bits: usize,
    /// Collision probability the session's relays were mined under.
    pub probability: f64,
}

pub fn claim_id(servicer: &Identity, session_seed: &Digest, session_start: u64) -> Digest {
    hash_parts(&[
        b"relay-mining/claim/v1",
        &(servicer.0.len() as u64).to_be_bytes(),
        servicer.0.as_bytes(),
        &session_seed.0,
        &session_start.to_be_bytes(),
    ])
}

/// Target path: the first `key_bits` bits of `H(block_hash || claim id)`.
pub fn derive_challenge(claim: &Claim, challenge_height: u64, block_hash: &Digest) -> Result<Digest, ClaimError> {
    if challenge_height <= claim.claim_height {
        return Err(ClaimError::OrderingViolation { claim: claim.claim_height, challenge: challenge_height });
    }
    Ok(hash_parts(&[b"relay-mining/challenge/v1", &block_hash.0, &claim.id.0]).masked(claim.key_bits))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofReveal {
    pub claim_id: Digest,
    pub target: Digest,
    pub proof: MembershipProof,
    /// Serialized relay stored at the leaf.
    #[serde(with = "hex_value")]
    pub value: Vec<u8>,
}

mod hex_value {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

impl ProofReveal {
    /// Builds the honest reveal for `target` from the servicer's trie.
    pub fn from_session(claim: &Claim, servicer: &ServicerSession, target: &Digest) -> Result<Self, smst::SmstError> {
        let proof = servicer.trie().closest_proof(target)?;
        let value = servicer.trie().get_value(&proof.key).ok_or(smst::SmstError::NotFound(proof.key))?;
        Ok(ProofReveal { claim_id: claim.id, target: *target, proof, value })
    }
}

/// The verification check that rejected a reveal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProofCheck {
    RootMismatch,
    LeafWeight,
    TargetMismatch,
    WrongLeaf,
    ValueMismatch,
    KeyMismatch,
    BadSignature,
    SessionMismatch,
}

/// Runs every check a verifier can perform without the servicer's trie.
pub fn check_reveal(
    claim: &Claim,
    expected_target: &Digest,
    reveal: &ProofReveal,
    verifier: &dyn Verifier,
) -> Result<(), ProofCheck> {
    let proof = &reveal.proof;
    if !smst::verify_proof(&claim.root, proof) {
        return Err(ProofCheck::RootMismatch);
    }
    if proof.weight != 1 {
        return Err(ProofCheck::LeafWeight);
    }
    if reveal.target != *expected_target {
        return Err(ProofCheck::TargetMismatch);
    }
    if !proof.follows_closest_path(expected_target) {
        return Err(ProofCheck::WrongLeaf);
    }
    if smst::value_hash(&reveal.value) != proof.value_hash {
        return Err(ProofCheck::ValueMismatch);
    }
    let relay = Relay::from_bytes(&reveal.value).ok_or(ProofCheck::ValueMismatch)?;
    if relay.digest().masked(claim.key_bits) != proof.key {
        return Err(ProofCheck::KeyMismatch);
    }
    if !relay.request.verify(verifier) || !relay.response.verify(verifier) {
        return Err(ProofCheck::BadSignature);
    }
    let req = &relay.request.request;
    let bound = req.app == claim.app
        && req.service == claim.service
        && req.session_seed == claim.session_seed
        && req.session_start == claim.session_start
        && req.servicer == claim.servicer
        && relay.response.response.servicer == claim.servicer
        && (claim.session_start..claim.session_end).contains(&req.height);
    if !bound {
        return Err(ProofCheck::SessionMismatch);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SettlementOutcome {
    Settled,
    ExpiredUnproven,
    InvalidProof,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Settlement {
    pub claim_id: Digest,
    pub outcome: SettlementOutcome,
    pub minted: u64,
    pub burned: u64,
}

/// Settled claims pay `round(sum * reward_rate / p)`; everything else pays 0.
pub fn settle(claim: &Claim, outcome: SettlementOutcome, reward_rate: f64) -> Settlement {
    let amount = match outcome {
        SettlementOutcome::Settled => (claim.root.sum as f64 * reward_rate / claim.probability).round() as u64,
        _ => 0,
    };
    Settlement { claim_id: claim.id, outcome, minted: amount, burned: amount }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Claim {
        height: u64,
        claim_id: Digest,
        servicer: Identity,
        app: Identity,
        service: Identity,
        session_start: u64,
        root_hash: Digest,
        root_sum: u64,
    },
    Challenge {
        height: u64,
        claim_id: Digest,
        block_hash: Digest,
        target: Digest,
    },
    Reveal {
        height: u64,
        claim_id: Digest,
        leaf_key: Digest,
        accepted: bool,
        failed_check: Option<ProofCheck>,
    },
    Expired {
        height: u64,
        claim_id: Digest,
    },
    Settlement {
        height: u64,
        claim_id: Digest,
        outcome: SettlementOutcome,
        minted: u64,
        burned: u64,
    },
    /// An application's settled burn for one session exceeded its
    /// `app_stake * ttrm` allowance.
    MarginBreach {
        height: u64,
        app: Identity,
        session_start: u64,
        burned: u64,
        allowance: u64,
    },
}

impl Event {
    pub fn height(&self) -> u64 {
        match self {
            Event::Claim { height, .. }
            | Event::Challenge { height, .. }
            | Event::Reveal { height, .. }
            | Event::Expired { height, .. }
            | Event::Settlement { height, .. }
            | Event::MarginBreach { height, .. } => *height,
        }
    }
}

pub fn write_events<W: Write>(mut out: W, events: &[Event]) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Token balances; applications start funded, servicers at zero.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Ledger {
    balances: BTreeMap<Identity, i128>,
    minted: u128,
    burned: u128,
}

impl Ledger {
    pub fn fund(&mut self, account: &Identity, amount: u64) {
        *self.balances.entry(account.clone()).or_default() += amount as i128;
    }

    pub fn balance(&self, account: &Identity) -> i128 {
        self.balances.get(account).copied().unwrap_or(0)
    }

    pub fn total_minted(&self) -> u128 {
        self.minted
    }

    pub fn total_burned(&self) -> u128 {
        self.burned
    }

    /// Burns from the application and mints to the servicer. Balances may go
    /// negative; the caller decides whether that is reportable.
    pub fn apply(&mut self, app: &Identity, servicer: &Identity, settlement: &Settlement) {
        self.burned += settlement.burned as u128;
        self.minted += settlement.minted as u128;
        *self.balances.entry(servicer.clone()).or_default() += settlement.minted as i128;
        *self.balances.entry(app.clone()).or_default() -= settlement.burned as i128;
    }

    pub fn balances(&self) -> impl Iterator<Item = (&Identity, i128)> {
        self.balances.iter().map(|(k, v)| (k, *v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ClaimState {
    Claimed,
    Challenged { height: u64, target: Digest },
    Verified,
    Rejected(ProofCheck),
    Expired,
    Settled(Settlement),
}

impl ClaimState {
    fn name(&self) -> &'static str {
        match self {
            ClaimState::Claimed => "claimed",
            ClaimState::Challenged { .. } => "challenged",
            ClaimState::Verified => "verified",
            ClaimState::Rejected(_) => "rejected",
            ClaimState::Expired => "expired",
            ClaimState::Settled(_) => "settled",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Verification {
    Accepted,
    Rejected(ProofCheck),
}

#[derive(Clone, Debug)]
struct Entry {
    claim: Claim,
    state: ClaimState,
}

/// Serialized claim registry plus ledger, driven block by block.
#[derive(Clone, Debug)]
pub struct ClaimRegistry {
    params: ClaimProofParams,
    entries: BTreeMap<Digest, Entry>,
    ledger: Ledger,
    events: Vec<Event>,
}

impl ClaimRegistry {
    pub fn new(params: ClaimProofParams) -> Result<Self, ClaimError> {
        params.validate()?;
        Ok(ClaimRegistry { params, entries: BTreeMap::new(), ledger: Ledger::default(), events: Vec::new() })
    }

    pub fn params(&self) -> &ClaimProofParams {
        &self.params
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut Ledger {
        &mut self.ledger
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }

    pub fn claim(&self, id: &Digest) -> Option<&Claim> {
        self.entries.get(id).map(|e| &e.claim)
    }

    pub fn state(&self, id: &Digest) -> Option<&ClaimState> {
        self.entries.get(id).map(|e| &e.state)
    }

    /// Claims not yet settled.
    pub fn open_claims(&self) -> impl Iterator<Item = (&Claim, &ClaimState)> {
        self.entries.values().filter(|e| !matches!(e.state, ClaimState::Settled(_))).map(|e| (&e.claim, &e.state))
    }

    fn entry_mut(&mut self, id: &Digest) -> Result<&mut Entry, ClaimError> {
        self.entries.get_mut(id).ok_or(ClaimError::UnknownClaim(*id))
    }

    /// Commits the servicer's current root and freezes its trie.
    pub fn submit_claim(
        &mut self,
        servicer: &mut ServicerSession,
        height: u64,
        probability: f64,
    ) -> Result<Claim, ClaimError> {
        let header = servicer.header().clone();
        let (start, end) = (header.end_height, header.end_height + self.params.claim_window);
        if !(start..end).contains(&height) {
            return Err(ClaimError::WindowViolation { height, start, end });
        }
        let id = claim_id(servicer.id(), &header.seed, header.start_height);
        if self.entries.contains_key(&id) {
            return Err(ClaimError::DuplicateClaim);
        }
        servicer.freeze();
        let claim = Claim {
            id,
            servicer: servicer.id().clone(),
            app: header.app,
            service: header.service,
            session_seed: header.seed,
            session_start: header.start_height,
            session_end: header.end_height,
            root: servicer.trie().root(),
            claim_height: height,
            key_bits: servicer.trie().key_bits(),
            probability,
        };
        self.events.push(Event::Claim {
            height,
            claim_id: id,
            servicer: claim.servicer.clone(),
            app: claim.app.clone(),
            service: claim.service.clone(),
            session_start: claim.session_start,
            root_hash: claim.root.hash,
            root_sum: claim.root.sum,
        });
        self.entries.insert(id, Entry { claim: claim.clone(), state: ClaimState::Claimed });
        Ok(claim)
    }

    /// Fixes the claim's target path from a block hash produced after it.
    pub fn challenge(&mut self, id: &Digest, height: u64, block_hash: &Digest) -> Result<Digest, ClaimError> {
        let entry = self.entry_mut(id)?;
        if entry.state != ClaimState::Claimed {
            return Err(ClaimError::InvalidState { expected: "claimed", found: entry.state.name() });
        }
        let target = derive_challenge(&entry.claim, height, block_hash)?;
        entry.state = ClaimState::Challenged { height, target };
        self.events.push(Event::Challenge { height, claim_id: *id, block_hash: *block_hash, target });
        Ok(target)
    }

    pub fn submit_proof(
        &mut self,
        reveal: &ProofReveal,
        height: u64,
        verifier: &dyn Verifier,
    ) -> Result<Verification, ClaimError> {
        let proof_window = self.params.proof_window;
        let entry = self.entry_mut(&reveal.claim_id)?;
        let (challenged_at, target) = match entry.state {
            ClaimState::Challenged { height, target } => (height, target),
            ref other => return Err(ClaimError::InvalidState { expected: "challenged", found: other.name() }),
        };
        let (start, end) = (challenged_at, challenged_at + proof_window);
        if !(start..end).contains(&height) {
            return Err(ClaimError::ProofWindowViolation { height, start, end });
        }
        let result = check_reveal(&entry.claim, &target, reveal, verifier);
        entry.state = match result {
            Ok(()) => ClaimState::Verified,
            Err(check) => ClaimState::Rejected(check),
        };
        self.events.push(Event::Reveal {
            height,
            claim_id: reveal.claim_id,
            leaf_key: reveal.proof.key,
            accepted: result.is_ok(),
            failed_check: result.err(),
        });
        Ok(match result {
            Ok(()) => Verification::Accepted,
            Err(check) => Verification::Rejected(check),
        })
    }

    /// Marks challenged claims whose proof window closed before `height`.
    pub fn expire(&mut self, height: u64) -> Vec<Digest> {
        let window = self.params.proof_window;
        let mut expired = Vec::new();
        for (id, entry) in self.entries.iter_mut() {
            if let ClaimState::Challenged { height: at, .. } = entry.state {
                if height >= at + window && entry.claim.root.sum > 0 {
                    entry.state = ClaimState::Expired;
                    expired.push(*id);
                }
            }
        }
        for id in &expired {
            self.events.push(Event::Expired { height, claim_id: *id });
        }
        expired
    }

    /// Pays out a claim in a terminal verification state. A zero-sum claim has
    /// nothing to prove and settles to zero once challenged.
    pub fn settle(&mut self, id: &Digest, height: u64) -> Result<Settlement, ClaimError> {
        let reward_rate = self.params.reward_rate;
        let entry = self.entry_mut(id)?;
        let outcome = match entry.state {
            ClaimState::Verified => SettlementOutcome::Settled,
            ClaimState::Challenged { .. } if entry.claim.root.sum == 0 => SettlementOutcome::Settled,
            ClaimState::Rejected(_) => SettlementOutcome::InvalidProof,
            ClaimState::Expired => SettlementOutcome::ExpiredUnproven,
            ref other => return Err(ClaimError::InvalidState { expected: "verified, rejected or expired", found: other.name() }),
        };
        let settlement = settle(&entry.claim, outcome, reward_rate);
        entry.state = ClaimState::Settled(settlement.clone());
        let (app, servicer) = (entry.claim.app.clone(), entry.claim.servicer.clone());
        self.events.push(Event::Settlement {
            height,
            claim_id: *id,
            outcome,
            minted: settlement.minted,
            burned: settlement.burned,
        });
        self.ledger.apply(&app, &servicer, &settlement);
        Ok(settlement)
    }

    /// Appends an event produced outside the registry (e.g. margin breaches).
    pub fn record(&mut self, event: Event) {
        self.events.push(event);
    }
}
