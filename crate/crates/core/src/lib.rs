//! Relay Mining: probabilistic relay accounting for decentralized RPC
//! networks.
//!
//! Servicers hash every relay they serve and keep only those whose digest
//! falls below a per-service difficulty threshold. Kept relays go into a
//! sparse Merkle sum trie whose root is claimed on chain; a later block hash
//! picks one leaf that must be proven. A per-service EMA controller keeps the
//! number of claims near a fixed target while `claims / p` remains an
//! unbiased estimate of real traffic.

pub mod claimproof;
pub mod config;
pub mod difficulty;
pub mod estimator;
pub mod primitives;
pub mod rng;
pub mod session;
pub mod smst;
pub mod tracesim;

pub use config::{Config, ConfigError, SimMode};
pub use primitives::{check_collision, digest, Difficulty, Digest};
