use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use relay_mining::claimproof::write_events;
use relay_mining::config::{Config, SimMode};
use relay_mining::difficulty::write_series_csv;
use relay_mining::estimator::{run_bias_experiment, write_grid_csv};
use relay_mining::smst::{self, path_from_hex, verify_proof, MembershipProof, SmstError, SumHash};
use relay_mining::tracesim::{
    compute_metrics, load_trace, run_simulation, synth_trace, write_metrics_csv, ShapeParams, SimError, TraceError,
    TraceShape,
};
use relay_mining::Digest;

#[derive(Parser)]
#[command(name = "relay-mining", version, about = "Relay Mining simulator and proof tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the difficulty controller over a trace or a synthetic shape.
    Simulate(SimulateArgs),
    /// Estimator bias/variability grid.
    Experiment(ExperimentArgs),
    /// Closest-leaf proof for a target, from an exported trie.
    Prove(ProveArgs),
    /// Check a proof against a root.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct Common {
    /// JSON configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides sim.seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Synthetic trace: steady, soft-surge, step-drop or step-surge (default steady)
    #[arg(long, conflicts_with = "trace")]
    shape: Option<TraceShape>,
    /// CSV trace: height,service_id,relay_count[,app_id,app_count]*
    #[arg(long)]
    trace: Option<PathBuf>,
    /// fast or full; overrides sim.mode
    #[arg(long)]
    mode: Option<SimMode>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    common: Common,
    /// Grid as "d1,d2,...:v1,v2,..."; overrides the configured grid.
    #[arg(long)]
    grid: Option<String>,
    /// Monte Carlo draws per cell; overrides estimator.draws
    #[arg(long)]
    draws: Option<u64>,
}

#[derive(Args)]
struct ProveArgs {
    /// Trie export file.
    #[arg(long)]
    export: PathBuf,
    /// Target path in hex.
    #[arg(long)]
    target: String,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Trie export whose root the proof must match.
    #[arg(long, required_unless_present = "root", conflicts_with_all = ["root", "sum"])]
    export: Option<PathBuf>,
    /// Root hash in hex, instead of an export.
    #[arg(long, requires = "sum")]
    root: Option<String>,
    /// Root sum, with `--root`.
    #[arg(long, requires = "root")]
    sum: Option<u64>,
    /// Proof file written by `prove`
    #[arg(long)]
    proof: PathBuf,
    /// Also require the proof to be the closest leaf for this target path.
    #[arg(long)]
    target: Option<String>,
    /// Key width used to read `--target` with `--root`.
    #[arg(long, default_value_t = 256)]
    key_bits: usize,
}

/// Exit 1: input parsed but is invalid or fails verification.
/// Exit 2: input could not be read or parsed.
enum Failure {
    Invalid(String),
    Parse(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Parse(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Invalid(m) | Failure::Parse(m) => m,
        }
    }
}

type Outcome = Result<(), Failure>;

fn io_fail(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Parse(format!("{}: {e}", path.display()))
}

fn load_config(common: &Common) -> Result<Config, Failure> {
    let mut config = match &common.config {
        None => Config::default(),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_fail(path, e))?;
            serde_json::from_str::<Config>(&text).map_err(|e| {
                let msg = format!("{}: {e}", path.display());
                match e.classify() {
                    serde_json::error::Category::Data => Failure::Invalid(msg),
                    _ => Failure::Parse(msg),
                }
            })?
        }
    };
    if let Some(seed) = common.seed {
        config.sim.seed = seed;
    }
    config.validate().map_err(|e| Failure::Invalid(format!("config {e}")))?;
    Ok(config)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Failure> {
    fs::create_dir_all(dir).map_err(|e| io_fail(dir, e))?;
    let path = dir.join(name);
    File::create(&path).map(BufWriter::new).map_err(|e| io_fail(&path, e))
}

fn write_out(dir: &Path, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Outcome {
    let mut w = create(dir, name)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| io_fail(&dir.join(name), e))
}

fn trace_failure(e: TraceError) -> Failure {
    match e {
        TraceError::InvalidShapeParams { .. } => Failure::Invalid(e.to_string()),
        _ => Failure::Parse(e.to_string()),
    }
}

fn sim_failure(e: SimError) -> Failure {
    Failure::Invalid(e.to_string())
}

fn metadata(config: &Config, command: &str, source: &str) -> serde_json::Value {
    json!({
        "command": command,
        "source": source,
        "config_hash": config.hash(),
        "seed": config.sim.seed,
        "mode": config.sim.mode,
        "version": env!("CARGO_PKG_VERSION"),
    })
}

fn simulate(args: SimulateArgs) -> Outcome {
    let mut config = load_config(&args.common)?;
    if let Some(mode) = args.mode {
        config.sim.mode = mode;
    }
    let (trace, source) = match (&args.trace, args.shape) {
        (Some(path), _) => (load_trace(path).map_err(trace_failure)?, path.display().to_string()),
        (None, shape) => {
            let shape = shape.unwrap_or(TraceShape::Steady);
            let params = ShapeParams { noise: config.sim.noise, ..ShapeParams::preset(shape) };
            (synth_trace(shape, &params, config.sim.seed).map_err(trace_failure)?, format!("synthetic:{shape}"))
        }
    };
    let output = run_simulation(&trace, &config).map_err(sim_failure)?;

    let warmup = config.difficulty.warmup_blocks() as usize;
    let mut services = Vec::new();
    for run in &output.services {
        // Traces shorter than the warm-up are evaluated in full.
        let skip = if run.blocks.len() > warmup { warmup } else { 0 };
        services.push(compute_metrics(&run.blocks, config.difficulty.target_claims, skip).map_err(sim_failure)?);
    }
    let settlement: Vec<_> = output
        .services
        .iter()
        .filter_map(|s| s.settlement.as_ref().map(|summary| json!({ "service_id": s.service_id, "summary": summary })))
        .collect();
    let aggregates = json!({
        "metadata": metadata(&config, "simulate", &source),
        "services": services,
        "settlement": settlement,
    });

    let dir = &args.common.out_dir;
    write_out(dir, "metrics.csv", |w| write_metrics_csv(w, &output.blocks()))?;
    let series: Vec<(&str, &[_])> =
        output.services.iter().map(|s| (s.service_id.as_str(), s.controller.as_slice())).collect();
    write_out(dir, "difficulty.csv", |w| write_series_csv(w, &series))?;
    write_out(dir, "events.ndjson", |w| write_events(w, &output.events()))?;
    write_out(dir, "aggregates.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &aggregates)?;
        writeln!(w)
    })?;

    for a in &services {
        println!(
            "{}: {} blocks, mean target error {:.3}%, volume error [{:.3}%, {:.3}%]",
            a.service_id,
            a.blocks_evaluated,
            a.mean_target_error_pct,
            a.min_volume_error_pct,
            a.max_volume_error_pct
        );
    }
    Ok(())
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>, Failure> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| Failure::Parse(format!("--grid {what} {x:?}: {e}"))))
        .collect()
}

fn experiment(args: ExperimentArgs) -> Outcome {
    let mut config = load_config(&args.common)?;
    if let Some(grid) = &args.grid {
        let (d, v) = grid
            .split_once(':')
            .ok_or_else(|| Failure::Parse("--grid must look like \"d1,d2:v1,v2\"".into()))?;
        config.estimator.difficulties = parse_list(d, "difficulty")?;
        config.estimator.participations = parse_list(v, "participation")?;
    }
    if let Some(draws) = args.draws {
        config.estimator.draws = draws;
    }
    config.validate().map_err(|e| Failure::Invalid(format!("config {e}")))?;
    let cells = run_bias_experiment(&config.estimator, config.difficulty.target_claims, config.sim.seed)
        .map_err(|e| Failure::Invalid(e.to_string()))?;

    let dir = &args.common.out_dir;
    write_out(dir, "bias_grid.csv", |w| write_grid_csv(w, &cells))?;
    let report = json!({
        "metadata": metadata(&config, "experiment", "bias-grid"),
        "estimator": config.estimator,
        "target_claims": config.difficulty.target_claims,
        "cells": cells,
    });
    write_out(dir, "experiment.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        writeln!(w)
    })?;
    let worst = cells.iter().map(|c| c.bias_pct).fold(f64::INFINITY, f64::min);
    println!("{} cells, lowest bias {worst:.3}%", cells.len());
    Ok(())
}

fn smst_failure(path: &Path, e: SmstError) -> Failure {
    let msg = format!("{}: {e}", path.display());
    match e {
        SmstError::Parse { .. } | SmstError::Io(_) => Failure::Parse(msg),
        _ => Failure::Invalid(msg),
    }
}

fn prove(args: ProveArgs) -> Outcome {
    let text = fs::read_to_string(&args.export).map_err(|e| io_fail(&args.export, e))?;
    let trie = smst::import(&text).map_err(|e| smst_failure(&args.export, e))?;
    let target = path_from_hex(&args.target, trie.key_bits()).map_err(|e| Failure::Parse(format!("--target: {e}")))?;
    let proof = trie.closest_proof(&target).map_err(|e| smst_failure(&args.export, e))?;
    let body = proof.to_text();
    write_out(&args.out_dir, "proof.txt", |w| w.write_all(body.as_bytes()))?;
    let root = trie.root();
    println!(
        "leaf {} weight {} root {} sum {}",
        smst::path_to_hex(&proof.key, trie.key_bits()),
        proof.weight,
        root.hash,
        root.sum
    );
    Ok(())
}

fn verify(args: VerifyArgs) -> Outcome {
    let (root, key_bits) = match (&args.export, &args.root, args.sum) {
        (Some(path), _, _) => {
            let text = fs::read_to_string(path).map_err(|e| io_fail(path, e))?;
            let trie = smst::import(&text).map_err(|e| smst_failure(path, e))?;
            (trie.root(), trie.key_bits())
        }
        (None, Some(hash), Some(sum)) => {
            let hash = Digest::from_hex(hash).map_err(|e| Failure::Parse(format!("--root: {e}")))?;
            (SumHash { hash, sum }, args.key_bits)
        }
        _ => return Err(Failure::Parse("either --export or --root with --sum is required".into())),
    };
    let text = fs::read_to_string(&args.proof).map_err(|e| io_fail(&args.proof, e))?;
    let proof = MembershipProof::from_text(&text).map_err(|e| smst_failure(&args.proof, e))?;
    if !verify_proof(&root, &proof) {
        return Err(Failure::Invalid("proof does not match the root".into()));
    }
    if let Some(t) = &args.target {
        let target = path_from_hex(t, key_bits).map_err(|e| Failure::Parse(format!("--target: {e}")))?;
        if !proof.follows_closest_path(&target) {
            return Err(Failure::Invalid("proof is not the closest leaf for the target".into()));
        }
    }
    println!("ok {}", smst::path_to_hex(&proof.key, key_bits));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Experiment(a) => experiment(a),
        Command::Prove(a) => prove(a),
        Command::Verify(a) => verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
