//! Per-service EMA difficulty controller.
//!
//! Each block: `R = C / p`, `r_ema = alpha * R + (1 - alpha) * r_ema`. At the
//! start of every block whose height is divisible by the update interval,
//! `p = min(1, T / r_ema)`, so claims in that block already use the new `p`.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::primitives::Difficulty;

#[derive(Debug, Error, PartialEq)]
pub enum DifficultyError {
    #[error("invalid difficulty parameter: {0}")]
    InvalidArgument(&'static str),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultyParams {
    /// Target claims per block, `T`.
    pub target_claims: u64,
    pub ema_alpha: f64,
    /// Blocks between probability updates, `U`.
    pub update_interval: u64,
}

impl Default for DifficultyParams {
    fn default() -> Self {
        DifficultyParams { target_claims: 10_000, ema_alpha: 0.1, update_interval: 4 }
    }
}

impl DifficultyParams {
    pub fn validate(&self) -> Result<(), DifficultyError> {
        if self.target_claims == 0 {
            return Err(DifficultyError::InvalidArgument("target_claims must be positive"));
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return Err(DifficultyError::InvalidArgument("ema_alpha must lie in (0, 1]"));
        }
        if self.update_interval == 0 {
            return Err(DifficultyError::InvalidArgument("update_interval must be positive"));
        }
        Ok(())
    }

    /// EMA warm-up length, `ceil(3 / alpha)` blocks.
    pub fn warmup_blocks(&self) -> u64 {
        (3.0 / self.ema_alpha).ceil() as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DifficultyState {
    params: DifficultyParams,
    r_ema: f64,
    difficulty: Difficulty,
    height: u64,
}

/// One row of the controller time series.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockObservation {
    pub height: u64,
    pub claims: u64,
    /// Probability the claims were drawn under.
    pub probability: f64,
    /// `C / p` for this block.
    pub estimate: f64,
    pub r_ema: f64,
    /// Probability in force for the next block.
    pub next_probability: f64,
}

impl DifficultyState {
    pub fn new(params: DifficultyParams) -> Result<Self, DifficultyError> {
        params.validate()?;
        Ok(DifficultyState { params, r_ema: 0.0, difficulty: Difficulty::FULL, height: 0 })
    }

    /// Starts from an arbitrary point, for replaying a controller mid-stream.
    pub fn with_state(params: DifficultyParams, r_ema: f64, probability: f64, height: u64) -> Result<Self, DifficultyError> {
        params.validate()?;
        if !(r_ema.is_finite() && r_ema >= 0.0) {
            return Err(DifficultyError::InvalidArgument("r_ema must be finite and >= 0"));
        }
        let difficulty = Difficulty::new(probability)
            .map_err(|_| DifficultyError::InvalidArgument("probability must lie in (0, 1]"))?;
        Ok(DifficultyState { params, r_ema, difficulty, height })
    }

    pub fn params(&self) -> &DifficultyParams {
        &self.params
    }

    pub fn difficulty(&self) -> Difficulty {
        self.difficulty
    }

    pub fn probability(&self) -> f64 {
        self.difficulty.probability()
    }

    pub fn r_ema(&self) -> f64 {
        self.r_ema
    }

    pub fn height(&self) -> u64 {
        self.height
    }

    pub fn observe_block(&mut self, claims: u64) -> BlockObservation {
        let p = self.difficulty.probability();
        let estimate = claims as f64 / p;
        let alpha = self.params.ema_alpha;
        self.r_ema = alpha * estimate + (1.0 - alpha) * self.r_ema;
        let height = self.height;
        self.height += 1;
        if self.height.is_multiple_of(self.params.update_interval) {
            let target = self.params.target_claims as f64;
            // r_ema == 0 means no traffic at all: treat as below target.
            self.difficulty = if self.r_ema <= target {
                Difficulty::FULL
            } else {
                Difficulty::clamped(target / self.r_ema)
            };
        }
        BlockObservation {
            height,
            claims,
            probability: p,
            estimate,
            r_ema: self.r_ema,
            next_probability: self.difficulty.probability(),
        }
    }
}

/// Controller time series, one row per (service, block).
pub fn write_series_csv<W: Write>(mut out: W, series: &[(&str, &[BlockObservation])]) -> io::Result<()> {
    writeln!(out, "service_id,height,claims,estimate,r_ema,probability")?;
    for (service, rows) in series {
        for o in rows.iter() {
            writeln!(out, "{service},{},{},{},{},{}", o.height, o.claims, o.estimate, o.r_ema, o.probability)?;
        }
    }
    Ok(())
}
