//! Relay volume estimation from sampled claims, and the per-application
//! bias/variability Monte Carlo grid.

use std::io::{self, Write};

use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::substream;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("invalid probability {0}")]
    InvalidProbability(f64),
    #[error("invalid experiment parameter: {0}")]
    InvalidArgument(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VolumeEstimate {
    pub claims: u64,
    pub probability: f64,
    pub estimate: f64,
}

/// `R = C / p`.
pub fn estimate_volume(claims: u64, probability: f64) -> Result<VolumeEstimate, EstimatorError> {
    if !(probability > 0.0 && probability <= 1.0) {
        return Err(EstimatorError::InvalidProbability(probability));
    }
    Ok(VolumeEstimate { claims, probability, estimate: claims as f64 / probability })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasExperimentParams {
    /// Relays per claim, `d = 1 / p`.
    pub difficulties: Vec<f64>,
    /// Application share of chain traffic, `v`.
    pub participations: Vec<f64>,
    /// Draws per cell, `I`.
    pub draws: u64,
    /// Chain relays per block. When absent each cell uses `T * d`, the volume
    /// at which difficulty `d` yields exactly `T` claims per block.
    #[serde(default)]
    pub relays_per_block: Option<f64>,
}

impl Default for BiasExperimentParams {
    fn default() -> Self {
        BiasExperimentParams {
            difficulties: vec![1.25, 2.5, 5.0, 10.0, 25.0, 50.0, 100.0, 250.0, 500.0, 1000.0],
            participations: vec![0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1],
            draws: 10_000,
            relays_per_block: None,
        }
    }
}

impl BiasExperimentParams {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        let bad = |m: &str| Err(EstimatorError::InvalidArgument(m.to_string()));
        if self.difficulties.is_empty() || self.participations.is_empty() {
            return bad("grid must be non-empty");
        }
        if self.difficulties.iter().any(|d| !(d.is_finite() && *d >= 1.0)) {
            return bad("difficulties must be finite and >= 1");
        }
        if self.participations.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
            return bad("participations must lie in (0, 1]");
        }
        if self.draws == 0 {
            return bad("draws must be >= 1");
        }
        if let Some(r) = self.relays_per_block {
            if !(r.is_finite() && r > 0.0) {
                return bad("relays_per_block must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BiasGridCell {
    pub difficulty: f64,
    pub participation: f64,
    pub draws: u64,
    /// `v * R`, the application's true relay volume.
    pub expected_relays: f64,
    /// Whole relays actually sampled, `floor(v * R)`.
    pub sampled_relays: u64,
    /// Mean of the per-draw estimates `x_i`.
    pub mean_estimate: f64,
    pub bias_pct: f64,
    /// `2 * sqrt(sum (x_i - mean)^2 / I) * 100`.
    pub variability_pct: f64,
    /// Variability divided by the mean estimate.
    pub relative_variability_pct: f64,
    /// Set when `v * R < 1`.
    pub degenerate: bool,
}

/// Draws `I` claim counts per cell, scales each by `d`, and reports bias and
/// variability of the application's volume estimate.
pub fn run_bias_experiment(
    params: &BiasExperimentParams,
    target_claims: u64,
    seed: u64,
) -> Result<Vec<BiasGridCell>, EstimatorError> {
    params.validate()?;
    if target_claims == 0 && params.relays_per_block.is_none() {
        return Err(EstimatorError::InvalidArgument("target_claims must be positive".into()));
    }
    let coords: Vec<(usize, usize)> = (0..params.difficulties.len())
        .flat_map(|i| (0..params.participations.len()).map(move |j| (i, j)))
        .collect();
    coords
        .into_par_iter()
        .map(|(i, j)| {
            let d = params.difficulties[i];
            let v = params.participations[j];
            let chain = params.relays_per_block.unwrap_or(target_claims as f64 * d);
            run_cell(d, v, chain, params.draws, seed, i as u64, j as u64)
        })
        .collect()
}

fn run_cell(d: f64, v: f64, chain_relays: f64, draws: u64, seed: u64, i: u64, j: u64) -> Result<BiasGridCell, EstimatorError> {
    let expected = v * chain_relays;
    let sampled = expected.floor() as u64;
    let binomial = Binomial::new(sampled, 1.0 / d).map_err(|e| EstimatorError::InvalidArgument(e.to_string()))?;
    let mut rng = substream(seed, "bias-cell", &[i, j]);
    let estimates: Vec<f64> = (0..draws).map(|_| binomial.sample(&mut rng) as f64 * d).collect();
    let n = draws as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let sq = estimates.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
    let variability = 2.0 * (sq / n).sqrt() * 100.0;
    let bias = (mean - expected) / expected * 100.0;
    Ok(BiasGridCell {
        difficulty: d,
        participation: v,
        draws,
        expected_relays: expected,
        sampled_relays: sampled,
        mean_estimate: mean,
        bias_pct: bias,
        variability_pct: variability,
        relative_variability_pct: if mean > 0.0 { variability / mean } else { 0.0 },
        degenerate: expected < 1.0,
    })
}

pub fn write_grid_csv<W: Write>(mut out: W, cells: &[BiasGridCell]) -> io::Result<()> {
    writeln!(
        out,
        "difficulty,participation,bias_pct,variability_pct,relative_variability_pct,degenerate,draws,expected_relays,mean_estimate"
    )?;
    for c in cells {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            c.difficulty,
            c.participation,
            c.bias_pct,
            c.variability_pct,
            c.relative_variability_pct,
            c.degenerate,
            c.draws,
            c.expected_relays,
            c.mean_estimate
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_division() {
        assert_eq!(estimate_volume(500, 0.05).unwrap().estimate, 10_000.0);
        assert_eq!(estimate_volume(123, 1.0).unwrap().estimate, 123.0);
        assert!(estimate_volume(1, 0.0).is_err());
        assert!(estimate_volume(1, -0.5).is_err());
        assert!(estimate_volume(1, 1.5).is_err());
    }

    #[test]
    fn single_draw_grid_completes() {
        let params = BiasExperimentParams { draws: 1, ..Default::default() };
        let cells = run_bias_experiment(&params, 10_000, 1).unwrap();
        assert_eq!(cells.len(), 70);
        assert!(cells.iter().all(|c| c.draws == 1 && c.variability_pct == 0.0));
    }

    #[test]
    fn degenerate_cells_are_flagged() {
        let params = BiasExperimentParams {
            difficulties: vec![2.0],
            participations: vec![0.1],
            draws: 10,
            relays_per_block: Some(5.0),
        };
        let cells = run_bias_experiment(&params, 10_000, 1).unwrap();
        assert!(cells[0].degenerate);
        assert_eq!(cells[0].sampled_relays, 0);
    }

    #[test]
    fn zero_bias_when_mean_matches() {
        // d = 1 makes every draw exact.
        let params = BiasExperimentParams {
            difficulties: vec![1.0],
            participations: vec![0.01],
            draws: 100,
            relays_per_block: None,
        };
        let c = &run_bias_experiment(&params, 10_000, 3).unwrap()[0];
        assert_eq!(c.bias_pct, 0.0);
        assert_eq!(c.variability_pct, 0.0);
    }

    #[test]
    fn seeded_grid_is_reproducible() {
        let params = BiasExperimentParams { draws: 50, ..Default::default() };
        assert_eq!(run_bias_experiment(&params, 10_000, 9).unwrap(), run_bias_experiment(&params, 10_000, 9).unwrap());
    }

    #[test]
    fn validation() {
        let mut p = BiasExperimentParams::default();
        p.participations.push(0.0);
        assert!(run_bias_experiment(&p, 10_000, 0).is_err());
        let p = BiasExperimentParams { difficulties: vec![0.5], ..Default::default() };
        assert!(run_bias_experiment(&p, 10_000, 0).is_err());
        let p = BiasExperimentParams { draws: 0, ..Default::default() };
        assert!(run_bias_experiment(&p, 10_000, 0).is_err());
    }
}
