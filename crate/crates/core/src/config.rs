//! Run configuration: every tunable of the protocol and the simulator, read
//! from JSON and validated before anything runs.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::claimproof::ClaimProofParams;
use crate::difficulty::DifficultyParams;
use crate::estimator::BiasExperimentParams;
use crate::primitives::{hash_parts, Digest};
use crate::session::SessionParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMode {
    /// Direct binomial sampling of claims, no tries.
    Fast,
    /// Real signed relays, tries, claims, proofs and settlement.
    Full,
}

impl std::str::FromStr for SimMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fast" => Ok(SimMode::Fast),
            "full" => Ok(SimMode::Full),
            other => Err(format!("unknown mode {other:?} (expected fast or full)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimParams {
    pub mode: SimMode,
    pub seed: u64,
    /// Pins the collision probability instead of running the controller.
    #[serde(default)]
    pub fixed_probability: Option<f64>,
    /// Servicers staked for each service.
    #[serde(default = "default_pool")]
    pub servicer_pool: usize,
    /// Participation weights of the staked applications, used when a trace
    /// has no per-application breakdown.
    #[serde(default = "default_apps")]
    pub app_weights: Vec<f64>,
    /// Relative standard deviation of per-block volume noise in synthetic traces.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_pool() -> usize {
    24
}

fn default_apps() -> Vec<f64> {
    vec![1.0]
}

fn default_noise() -> f64 {
    0.01
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            mode: SimMode::Fast,
            seed: 7,
            fixed_probability: None,
            servicer_pool: default_pool(),
            app_weights: default_apps(),
            noise: default_noise(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub difficulty: DifficultyParams,
    pub session: SessionParams,
    pub claimproof: ClaimProofParams,
    pub estimator: BiasExperimentParams,
    pub sim: SimParams,
}

/// A configuration problem, naming the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn field_err(field: &str, message: impl fmt::Display) -> ConfigError {
    ConfigError { field: field.to_string(), message: message.to_string() }
}

impl Config {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.difficulty.validate().map_err(|e| field_err("difficulty", e))?;
        self.session.validate().map_err(|e| field_err("session", e))?;
        self.claimproof.validate().map_err(|e| field_err("claimproof", e))?;
        self.estimator.validate().map_err(|e| field_err("estimator", e))?;
        let sim = &self.sim;
        if let Some(p) = sim.fixed_probability {
            if !(p > 0.0 && p <= 1.0) {
                return Err(field_err("sim.fixed_probability", "must lie in (0, 1]"));
            }
        }
        if sim.servicer_pool < self.session.servicers_per_session {
            return Err(field_err(
                "sim.servicer_pool",
                format!("must be at least session.servicers_per_session ({})", self.session.servicers_per_session),
            ));
        }
        if sim.app_weights.is_empty() || sim.app_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(field_err("sim.app_weights", "must be a non-empty list of positive weights"));
        }
        if !(sim.noise.is_finite() && sim.noise >= 0.0) {
            return Err(field_err("sim.noise", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> Digest {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hash_parts(&[&bytes])
    }
}
