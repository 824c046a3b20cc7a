//! Hashing, the digest-vs-difficulty collision test, and a pluggable
//! signature abstraction.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Smallest collision probability a [`Difficulty`] may carry (2^-64).
pub const MIN_PROBABILITY: f64 = 1.0 / 18_446_744_073_709_551_616.0;

const RELAY_DIGEST_TAG: &[u8] = b"relay-mining/relay/v1";
const KEYED_SIG_TAG: &[u8] = b"relay-mining/keyed-sig/v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PrimitiveError {
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("invalid collision probability {0}")]
    InvalidProbability(String),
    #[error("invalid hex digest: {0}")]
    InvalidHex(String),
}

/// A 32-byte hash output, ordered as a big-endian unsigned integer.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, PrimitiveError> {
        let bytes = hex::decode(s.trim()).map_err(|e| PrimitiveError::InvalidHex(e.to_string()))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| PrimitiveError::InvalidHex(format!("expected 32 bytes in {s:?}")))?;
        Ok(Digest(arr))
    }

    /// Bit `index` counted from the most significant bit of byte 0.
    pub fn bit(&self, index: usize) -> bool {
        (self.0[index / 8] >> (7 - index % 8)) & 1 == 1
    }

    /// Clears every bit at position `bits` and beyond.
    pub fn masked(&self, bits: usize) -> Digest {
        let mut out = self.0;
        for (i, byte) in out.iter_mut().enumerate() {
            let lo = i * 8;
            if lo >= bits {
                *byte = 0;
            } else if lo + 8 > bits {
                *byte &= 0xffu8 << (lo + 8 - bits);
            }
        }
        Digest(out)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for Digest {
    type Err = PrimitiveError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Digest::from_hex(s)
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Digest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// SHA-256 over the concatenation of `parts`.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part);
    }
    Digest(hasher.finalize().into())
}

/// Digest of a signed request/response pair. Each half is length-prefixed so
/// that moving bytes across the boundary changes the result.
pub fn digest(request: &[u8], response: &[u8]) -> Result<Digest, PrimitiveError> {
    if request.is_empty() {
        return Err(PrimitiveError::InvalidArgument("empty request"));
    }
    if response.is_empty() {
        return Err(PrimitiveError::InvalidArgument("empty response"));
    }
    Ok(hash_parts(&[
        RELAY_DIGEST_TAG,
        &(request.len() as u64).to_be_bytes(),
        request,
        &(response.len() as u64).to_be_bytes(),
        response,
    ]))
}

/// Collision probability together with its 256-bit threshold.
///
/// `threshold == None` stands for 2^256: every digest collides.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct Difficulty {
    probability: f64,
    threshold: Option<[u8; 32]>,
}

impl Difficulty {
    pub const FULL: Difficulty = Difficulty { probability: 1.0, threshold: None };

    /// Rejects anything outside (0, 1]; values below 2^-64 are raised to the floor.
    pub fn new(probability: f64) -> Result<Self, PrimitiveError> {
        if !probability.is_finite() || probability <= 0.0 || probability > 1.0 {
            return Err(PrimitiveError::InvalidProbability(probability.to_string()));
        }
        Ok(Self::clamped(probability))
    }

    /// Clamps into [2^-64, 1]. NaN maps to 1.
    pub fn clamped(probability: f64) -> Self {
        if probability.is_nan() || probability >= 1.0 {
            return Self::FULL;
        }
        let probability = probability.max(MIN_PROBABILITY);
        Difficulty { probability, threshold: Some(threshold_bytes(probability)) }
    }

    pub fn probability(&self) -> f64 {
        self.probability
    }

    /// Inverse of the probability: expected relays per collision.
    pub fn relays_per_claim(&self) -> f64 {
        1.0 / self.probability
    }

    /// Big-endian threshold bytes, `None` meaning 2^256.
    pub fn threshold(&self) -> Option<&[u8; 32]> {
        self.threshold.as_ref()
    }
}

/// floor(p * 2^256) for p in [2^-64, 1), at least 1.
fn threshold_bytes(probability: f64) -> [u8; 32] {
    let bits = probability.to_bits();
    let exponent = ((bits >> 52) & 0x7ff) as i64;
    let fraction = bits & ((1u64 << 52) - 1);
    // Normal numbers only: the floor keeps p well above the subnormal range.
    debug_assert!(exponent != 0);
    let mantissa = fraction | (1u64 << 52);
    // p = mantissa * 2^(exponent - 1075)
    let shift = exponent - 1075 + 256;
    let mut value = BigUint::from(mantissa);
    if shift >= 0 {
        value <<= shift as usize;
    } else {
        value >>= (-shift) as usize;
    }
    if value == BigUint::ZERO {
        value = BigUint::from(1u8);
    }
    let raw = value.to_bytes_be();
    let mut out = [0u8; 32];
    out[32 - raw.len()..].copy_from_slice(&raw);
    out
}

/// True iff the digest, read as a big-endian integer, is strictly below the
/// difficulty threshold.
pub fn check_collision(d: &Digest, difficulty: &Difficulty) -> bool {
    match difficulty.threshold {
        None => true,
        Some(ref threshold) => d.0 < *threshold,
    }
}

/// Opaque actor identity (application, servicer or service).
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Identity(pub String);

impl Identity {
    pub fn new(s: impl Into<String>) -> Self {
        Identity(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Signature(#[serde(with = "hex_bytes")] pub Vec<u8>);

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

pub trait Signer {
    fn id(&self) -> &Identity;
    fn sign(&self, message: &[u8]) -> Signature;
}

/// Verification never errors; malformed signatures simply fail.
pub trait Verifier {
    fn verify(&self, signer: &Identity, message: &[u8], signature: &Signature) -> bool;
}

/// Deterministic keyed-hash signing key. Stand-in for an asymmetric scheme.
#[derive(Clone)]
pub struct KeyPair {
    id: Identity,
    secret: [u8; 32],
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("id", &self.id).finish_non_exhaustive()
    }
}

fn keyed_signature(secret: &[u8; 32], message: &[u8]) -> Signature {
    Signature(hash_parts(&[KEYED_SIG_TAG, secret, message]).0.to_vec())
}

impl Signer for KeyPair {
    fn id(&self) -> &Identity {
        &self.id
    }

    fn sign(&self, message: &[u8]) -> Signature {
        keyed_signature(&self.secret, message)
    }
}

/// Holds the secret for every issued key; verification recomputes the tag.
#[derive(Default, Clone, Debug)]
pub struct KeyRegistry {
    secrets: HashMap<Identity, [u8; 32]>,
}

impl KeyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Derives a key for `id` from `seed` and registers it.
    pub fn issue(&mut self, id: Identity, seed: &[u8]) -> KeyPair {
        let secret = hash_parts(&[b"relay-mining/key/v1", seed, id.0.as_bytes()]).0;
        self.secrets.insert(id.clone(), secret);
        KeyPair { id, secret }
    }
}

impl Verifier for KeyRegistry {
    fn verify(&self, signer: &Identity, message: &[u8], signature: &Signature) -> bool {
        match self.secrets.get(signer) {
            Some(secret) => keyed_signature(secret, message) == *signature,
            None => false,
        }
    }
}
