//! Block-by-block simulation over relay traces.
//!
//! Two modes share one sampling core: per block the service's traffic is split
//! across applications and session servicer slots, and each (application,
//! slot) cell draws its collision count from `Binomial(n, p)`. Fast mode
//! spends tokens and counts claims directly. Full mode materializes the same
//! cell as signed relays whose digests collide exactly at the drawn positions
//! and pushes them through admission, tries, claims, proofs and settlement.
//! Both modes therefore report identical claim counts for a given seed.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::claimproof::{ClaimRegistry, Event, ProofReveal, SettlementOutcome};
use crate::config::{Config, ConfigError, SimMode};
use crate::difficulty::{BlockObservation, DifficultyState};
use crate::primitives::{check_collision, hash_parts, Difficulty, Digest, Identity, KeyPair, KeyRegistry, Signer};
use crate::rng::{label_index, substream};
use crate::session::{new_session, Relay, RelayRequest, ServicerSession, SessionHeader, TokenBudget};

/// Upper bound on total trace relays in full mode.
pub const FULL_MODE_MAX_RELAYS: u64 = 2_000_000;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("malformed trace at line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("invalid {shape} parameters: {msg}")]
    InvalidShapeParams { shape: TraceShape, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("trace is empty")]
    EmptyTrace,
    #[error("no blocks left after the {warmup}-block warm-up")]
    EmptyWindow { warmup: usize },
    #[error("simulation invariant violated: {0}")]
    Internal(String),
}

fn internal<E: std::fmt::Display>(e: E) -> SimError {
    SimError::Internal(e.to_string())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceBlock {
    pub height: u64,
    pub service_id: String,
    pub relay_count: u64,
    /// Optional per-application split; sums to `relay_count` when present.
    pub breakdown: Vec<(String, u64)>,
}

const TRACE_HEADER: [&str; 3] = ["height", "service_id", "relay_count"];

/// Parses the trace CSV: `height,service_id,relay_count[,app_id,app_count]*`.
/// Heights must be contiguous and strictly increasing per service.
pub fn parse_trace(text: &str) -> Result<Vec<TraceBlock>, TraceError> {
    let malformed = |line: usize, msg: String| TraceError::Malformed { line, msg };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| malformed(1, "missing header".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[..3] != TRACE_HEADER {
        return Err(malformed(1, format!("header must start with {}", TRACE_HEADER.join(","))));
    }
    let extra = &cols[3..];
    if !extra.len().is_multiple_of(2) || extra.chunks(2).any(|c| c != ["app_id", "app_count"]) {
        return Err(malformed(1, "extra header columns must be app_id,app_count pairs".into()));
    }

    let mut blocks = Vec::new();
    let mut last: HashMap<String, u64> = HashMap::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() < 3 || !(f.len() - 3).is_multiple_of(2) {
            return Err(malformed(line_no, format!("expected 3 + 2k fields, got {}", f.len())));
        }
        let num = |s: &str, what: &str| s.parse::<u64>().map_err(|e| malformed(line_no, format!("{what}: {e}")));
        let height = num(f[0], "height")?;
        let service_id = f[1].to_string();
        if service_id.is_empty() {
            return Err(malformed(line_no, "empty service_id".into()));
        }
        let relay_count = num(f[2], "relay_count")?;
        let mut breakdown = Vec::new();
        for pair in f[3..].chunks(2) {
            breakdown.push((pair[0].to_string(), num(pair[1], "app_count")?));
        }
        if !breakdown.is_empty() && breakdown.iter().map(|(_, c)| c).sum::<u64>() != relay_count {
            return Err(malformed(line_no, "per-app counts do not sum to relay_count".into()));
        }
        if let Some(&prev) = last.get(&service_id) {
            if height == prev {
                return Err(malformed(line_no, format!("duplicate height {height} for {service_id}")));
            }
            if height < prev {
                return Err(malformed(line_no, format!("height {height} after {prev} for {service_id}")));
            }
            if height != prev + 1 {
                return Err(malformed(line_no, format!("gap between heights {prev} and {height} for {service_id}")));
            }
        }
        last.insert(service_id.clone(), height);
        blocks.push(TraceBlock { height, service_id, relay_count, breakdown });
    }
    blocks.sort_by_key(|b| b.height);
    Ok(blocks)
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<TraceBlock>, TraceError> {
    parse_trace(&std::fs::read_to_string(path)?)
}

pub fn format_trace(blocks: &[TraceBlock]) -> String {
    let pairs = blocks.iter().map(|b| b.breakdown.len()).max().unwrap_or(0);
    let mut out = TRACE_HEADER.join(",");
    for _ in 0..pairs {
        out.push_str(",app_id,app_count");
    }
    out.push('\n');
    for b in blocks {
        let _ = write!(out, "{},{},{}", b.height, b.service_id, b.relay_count);
        for (app, count) in &b.breakdown {
            let _ = write!(out, ",{app},{count}");
        }
        out.push('\n');
    }
    out
}

pub fn save_trace(path: impl AsRef<Path>, blocks: &[TraceBlock]) -> io::Result<()> {
    std::fs::write(path, format_trace(blocks))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceShape {
    Steady,
    SoftSurge,
    StepDrop,
    StepSurge,
}

impl TraceShape {
    pub const ALL: [TraceShape; 4] = [TraceShape::Steady, TraceShape::SoftSurge, TraceShape::StepDrop, TraceShape::StepSurge];

    pub fn name(&self) -> &'static str {
        match self {
            TraceShape::Steady => "steady",
            TraceShape::SoftSurge => "soft-surge",
            TraceShape::StepDrop => "step-drop",
            TraceShape::StepSurge => "step-surge",
        }
    }
}

impl std::fmt::Display for TraceShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TraceShape {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TraceShape::ALL
            .into_iter()
            .find(|shape| shape.name() == s)
            .ok_or_else(|| format!("unknown shape {s:?} (expected steady, soft-surge, step-drop or step-surge)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShapeParams {
    pub service_id: String,
    pub blocks: u64,
    /// Blocks at `start_level` before the change begins.
    pub lead_in: u64,
    pub start_level: f64,
    pub end_level: f64,
    /// Blocks over which the level moves from start to end.
    pub transition_blocks: u64,
    /// Relative standard deviation of multiplicative per-block noise.
    pub noise: f64,
}

impl ShapeParams {
    /// Levels taken from the observed mainnet case studies.
    pub fn preset(shape: TraceShape) -> Self {
        let (blocks, lead_in, start_level, end_level, transition_blocks) = match shape {
            TraceShape::Steady => (530, 0, 1e6, 1e6, 1),
            TraceShape::SoftSurge => (375, 100, 2.9e6, 1.1e7, 175),
            TraceShape::StepDrop => (200, 100, 273e3, 21e3, 1),
            TraceShape::StepSurge => (200, 100, 1120.0, 276e3, 1),
        };
        ShapeParams {
            service_id: "svc-0001".to_string(),
            blocks,
            lead_in,
            start_level,
            end_level,
            transition_blocks,
            noise: 0.0,
        }
    }

    fn validate(&self, shape: TraceShape) -> Result<(), String> {
        if self.blocks == 0 {
            return Err("blocks must be positive".into());
        }
        if self.service_id.is_empty() || self.service_id.contains(',') {
            return Err("service_id must be non-empty and comma-free".into());
        }
        for level in [self.start_level, self.end_level] {
            if !(level.is_finite() && level >= 0.0) {
                return Err("levels must be finite and >= 0".into());
            }
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err("noise must be finite and >= 0".into());
        }
        let fits = self.lead_in + self.transition_blocks <= self.blocks;
        match shape {
            TraceShape::Steady => Ok(()),
            TraceShape::SoftSurge => {
                if self.end_level <= self.start_level {
                    return Err("soft-surge needs end_level > start_level".into());
                }
                if self.transition_blocks == 0 || !fits {
                    return Err("soft-surge ramp must be non-empty and fit inside the trace".into());
                }
                Ok(())
            }
            TraceShape::StepDrop | TraceShape::StepSurge => {
                let direction_ok = if shape == TraceShape::StepDrop {
                    self.end_level < self.start_level
                } else {
                    self.end_level > self.start_level
                };
                if !direction_ok {
                    return Err(format!("{shape} level change has the wrong direction"));
                }
                if !(1..=3).contains(&self.transition_blocks) || !fits {
                    return Err("step transition must take 1 to 3 blocks and fit inside the trace".into());
                }
                Ok(())
            }
        }
    }

    fn level_at(&self, shape: TraceShape, h: u64) -> f64 {
        if shape == TraceShape::Steady || h < self.lead_in {
            return self.start_level;
        }
        let k = h - self.lead_in + 1;
        if k >= self.transition_blocks {
            self.end_level
        } else {
            self.start_level + (self.end_level - self.start_level) * k as f64 / self.transition_blocks as f64
        }
    }
}

/// Deterministic synthetic trace starting at height 0.
pub fn synth_trace(shape: TraceShape, params: &ShapeParams, seed: u64) -> Result<Vec<TraceBlock>, TraceError> {
    params.validate(shape).map_err(|msg| TraceError::InvalidShapeParams { shape, msg })?;
    let noise = if params.noise > 0.0 {
        Some(Normal::new(0.0, params.noise).map_err(|e| TraceError::InvalidShapeParams { shape, msg: e.to_string() })?)
    } else {
        None
    };
    let svc = label_index(&params.service_id);
    Ok((0..params.blocks)
        .map(|h| {
            let mut level = params.level_at(shape, h);
            if let Some(n) = &noise {
                let mut rng = substream(seed, "trace-noise", &[svc, h]);
                level *= 1.0 + n.sample(&mut rng);
            }
            TraceBlock {
                height: h,
                service_id: params.service_id.clone(),
                relay_count: level.max(0.0).round() as u64,
                breakdown: Vec::new(),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockMetrics {
    pub height: u64,
    pub service_id: String,
    /// True relay volume `R*`.
    pub relays: u64,
    pub probability: f64,
    pub claims: u64,
    /// `C / p`.
    pub estimate: f64,
    pub r_ema: f64,
    pub target_error_pct: f64,
    pub volume_error_pct: f64,
}

pub fn target_error_pct(claims: u64, target: u64) -> f64 {
    100.0 * (claims as f64 - target as f64) / target as f64
}

/// Zero when there was no traffic to estimate.
pub fn volume_error_pct(estimate: f64, relays: u64) -> f64 {
    if relays == 0 {
        return if estimate == 0.0 { 0.0 } else { f64::INFINITY };
    }
    100.0 * (estimate - relays as f64) / relays as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregates {
    pub service_id: String,
    pub blocks_total: usize,
    pub warmup_blocks: usize,
    pub blocks_evaluated: usize,
    pub min_claims: u64,
    pub max_claims: u64,
    pub mean_target_error_pct: f64,
    pub min_target_error_pct: f64,
    pub max_target_error_pct: f64,
    /// `sum(C - T)` over the evaluated blocks.
    pub accumulated_target_error_claims: i64,
    pub accumulated_target_error_per_block: f64,
    pub mean_volume_error_pct: f64,
    pub min_volume_error_pct: f64,
    pub max_volume_error_pct: f64,
}

/// Aggregates one service's series after skipping `warmup` blocks.
pub fn compute_metrics(blocks: &[BlockMetrics], target: u64, warmup: usize) -> Result<Aggregates, SimError> {
    let window = blocks.get(warmup..).filter(|w| !w.is_empty()).ok_or(SimError::EmptyWindow { warmup })?;
    let n = window.len() as f64;
    let fold_min = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::INFINITY, f64::min);
    let fold_max = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::NEG_INFINITY, f64::max);
    let accumulated: i64 = window.iter().map(|b| b.claims as i64 - target as i64).sum();
    Ok(Aggregates {
        service_id: window[0].service_id.clone(),
        blocks_total: blocks.len(),
        warmup_blocks: warmup,
        blocks_evaluated: window.len(),
        min_claims: window.iter().map(|b| b.claims).min().unwrap_or(0),
        max_claims: window.iter().map(|b| b.claims).max().unwrap_or(0),
        mean_target_error_pct: window.iter().map(|b| b.target_error_pct).sum::<f64>() / n,
        min_target_error_pct: fold_min(&mut window.iter().map(|b| b.target_error_pct)),
        max_target_error_pct: fold_max(&mut window.iter().map(|b| b.target_error_pct)),
        accumulated_target_error_claims: accumulated,
        accumulated_target_error_per_block: accumulated as f64 / n,
        mean_volume_error_pct: window.iter().map(|b| b.volume_error_pct).sum::<f64>() / n,
        min_volume_error_pct: fold_min(&mut window.iter().map(|b| b.volume_error_pct)),
        max_volume_error_pct: fold_max(&mut window.iter().map(|b| b.volume_error_pct)),
    })
}

pub fn write_metrics_csv<W: Write>(mut out: W, blocks: &[BlockMetrics]) -> io::Result<()> {
    writeln!(out, "height,service_id,relays,probability,claims,estimate,r_ema,target_error_pct,volume_error_pct")?;
    for b in blocks {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            b.height,
            b.service_id,
            b.relays,
            b.probability,
            b.claims,
            b.estimate,
            b.r_ema,
            b.target_error_pct,
            b.volume_error_pct
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SettlementSummary {
    pub claims: u64,
    pub settled: u64,
    pub expired_unproven: u64,
    pub invalid_proof: u64,
    pub claimed_relays: u64,
    pub minted: u128,
    pub burned: u128,
    pub margin_breaches: u64,
}

#[derive(Clone, Debug)]
pub struct ServiceRun {
    pub service_id: String,
    pub blocks: Vec<BlockMetrics>,
    pub controller: Vec<BlockObservation>,
    pub events: Vec<Event>,
    pub settlement: Option<SettlementSummary>,
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    pub services: Vec<ServiceRun>,
}

impl SimOutput {
    /// All block rows ordered by height, then by service order.
    pub fn blocks(&self) -> Vec<BlockMetrics> {
        let mut rows: Vec<(usize, &BlockMetrics)> =
            self.services.iter().enumerate().flat_map(|(i, s)| s.blocks.iter().map(move |b| (i, b))).collect();
        rows.sort_by_key(|(i, b)| (b.height, *i));
        rows.into_iter().map(|(_, b)| b.clone()).collect()
    }

    /// All events ordered by height, then by service order.
    pub fn events(&self) -> Vec<Event> {
        let mut rows: Vec<(usize, usize, &Event)> = self
            .services
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.events.iter().enumerate().map(move |(j, e)| (i, j, e)))
            .collect();
        rows.sort_by_key(|(i, j, e)| (e.height(), *i, *j));
        rows.into_iter().map(|(_, _, e)| e.clone()).collect()
    }

    pub fn claims(&self) -> Vec<u64> {
        self.blocks().iter().map(|b| b.claims).collect()
    }
}

/// Runs every service in the trace; services are independent and run in parallel.
pub fn run_simulation(trace: &[TraceBlock], config: &Config) -> Result<SimOutput, SimError> {
    config.validate()?;
    if trace.is_empty() {
        return Err(SimError::EmptyTrace);
    }
    if config.sim.mode == SimMode::Full {
        let total: u64 = trace.iter().map(|b| b.relay_count).sum();
        if total > FULL_MODE_MAX_RELAYS {
            return Err(ConfigError {
                field: "sim.mode".into(),
                message: format!("full mode is limited to {FULL_MODE_MAX_RELAYS} relays, trace has {total}"),
            }
            .into());
        }
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<&str, Vec<&TraceBlock>> = HashMap::new();
    for b in trace {
        if !groups.contains_key(b.service_id.as_str()) {
            order.push(b.service_id.clone());
        }
        groups.entry(b.service_id.as_str()).or_default().push(b);
    }
    let services = order
        .par_iter()
        .map(|svc| run_service(svc, &groups[svc.as_str()], config))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SimOutput { services })
}

fn sample_binomial<R: Rng>(rng: &mut R, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("p in (0, 1)").sample(rng)
}

/// Splits `n` across `weights` by sequential conditional binomials.
fn multinomial<R: Rng>(rng: &mut R, n: u64, weights: &[f64]) -> Vec<u64> {
    let mut out = vec![0; weights.len()];
    let mut remaining = n;
    let mut rest: f64 = weights.iter().sum();
    for (i, w) in weights.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if i + 1 == weights.len() {
            out[i] = remaining;
            break;
        }
        let k = sample_binomial(rng, remaining, (w / rest).min(1.0));
        out[i] = k;
        remaining -= k;
        rest -= w;
    }
    out
}

fn app_name(index: usize) -> String {
    format!("app-{index:03}")
}

fn run_service(service_id: &str, blocks: &[&TraceBlock], config: &Config) -> Result<ServiceRun, SimError> {
    let seed = config.sim.seed;
    let svc_index = label_index(service_id);
    let target = config.difficulty.target_claims;
    let slots = config.session.servicers_per_session;
    let slot_weights = vec![1.0; slots];
    let budget = config.session.budget().map_err(internal)?;
    let fixed = config.sim.fixed_probability.map(Difficulty::clamped);
    let mut controller = DifficultyState::new(config.difficulty.clone()).map_err(internal)?;
    let mut world = match config.sim.mode {
        SimMode::Full => Some(FullWorld::new(service_id, config, budget.clone())?),
        SimMode::Fast => None,
    };
    let mut tokens: HashMap<(String, usize), u64> = HashMap::new();
    let mut token_session = None;

    let mut metrics = Vec::with_capacity(blocks.len());
    let mut series = Vec::with_capacity(blocks.len());
    for block in blocks {
        let h = block.height;
        let difficulty = fixed.unwrap_or(controller.difficulty());
        let session_start = config.session.session_start(h);
        if token_session != Some(session_start) {
            tokens.clear();
            token_session = Some(session_start);
        }
        if let Some(w) = world.as_mut() {
            w.begin_block(h, difficulty)?;
        }

        let mut rng = substream(seed, "traffic", &[svc_index, h]);
        let per_app: Vec<(String, u64)> = if block.breakdown.is_empty() {
            multinomial(&mut rng, block.relay_count, &config.sim.app_weights)
                .into_iter()
                .enumerate()
                .map(|(i, n)| (app_name(i), n))
                .collect()
        } else {
            block.breakdown.clone()
        };

        let mut claims = 0u64;
        for (app, count) in &per_app {
            if *count == 0 {
                continue;
            }
            for (slot, n) in multinomial(&mut rng, *count, &slot_weights).into_iter().enumerate() {
                if n == 0 {
                    continue;
                }
                let collisions = sample_binomial(&mut rng, n, difficulty.probability());
                claims += match world.as_mut() {
                    Some(w) => w.serve_cell(h, app, slot, n, collisions, difficulty)?,
                    None => {
                        let left = tokens.entry((app.clone(), slot)).or_insert(budget.per_servicer);
                        let taken = collisions.min(*left);
                        *left -= taken;
                        taken
                    }
                };
            }
        }

        let observation = controller.observe_block(claims);
        let p = difficulty.probability();
        let estimate = claims as f64 / p;
        metrics.push(BlockMetrics {
            height: h,
            service_id: service_id.to_string(),
            relays: block.relay_count,
            probability: p,
            claims,
            estimate,
            r_ema: observation.r_ema,
            target_error_pct: target_error_pct(claims, target),
            volume_error_pct: volume_error_pct(estimate, block.relay_count),
        });
        series.push(observation);
    }

    let (events, settlement) = match world {
        Some(mut w) => {
            let last = blocks.last().map(|b| b.height).unwrap_or(0);
            w.drain(last + 1)?;
            (w.registry.take_events(), Some(w.summary))
        }
        None => (Vec::new(), None),
    };
    Ok(ServiceRun { service_id: service_id.to_string(), blocks: metrics, controller: series, events, settlement })
}

pub fn block_hash(seed: u64, height: u64) -> Digest {
    hash_parts(&[b"relay-mining/block/v1", &seed.to_be_bytes(), &height.to_be_bytes()])
}

struct ActiveSession {
    header: SessionHeader,
    servicers: Vec<ServicerSession>,
}

struct PendingClaim {
    id: Digest,
    servicer: ServicerSession,
}

/// Full-fidelity world for one service: keys, sessions, claims and ledger.
struct FullWorld {
    service: Identity,
    seed: u64,
    svc_index: u64,
    config: Config,
    budget: TokenBudget,
    keys: KeyRegistry,
    app_keys: HashMap<String, KeyPair>,
    pool: Vec<Identity>,
    pool_keys: HashMap<Identity, KeyPair>,
    active: BTreeMap<String, ActiveSession>,
    session_probability: BTreeMap<u64, f64>,
    pending: Vec<PendingClaim>,
    registry: ClaimRegistry,
    burned: BTreeMap<(Identity, u64), u64>,
    breached: HashSet<(Identity, u64)>,
    summary: SettlementSummary,
}

impl FullWorld {
    fn new(service_id: &str, config: &Config, budget: TokenBudget) -> Result<Self, SimError> {
        let seed_bytes = config.sim.seed.to_be_bytes();
        let mut keys = KeyRegistry::new();
        let pool: Vec<Identity> =
            (0..config.sim.servicer_pool).map(|i| Identity::new(format!("servicer-{i:03}"))).collect();
        let pool_keys = pool.iter().map(|id| (id.clone(), keys.issue(id.clone(), &seed_bytes))).collect();
        Ok(FullWorld {
            service: Identity::new(service_id),
            seed: config.sim.seed,
            svc_index: label_index(service_id),
            config: config.clone(),
            budget,
            keys,
            app_keys: HashMap::new(),
            pool,
            pool_keys,
            active: BTreeMap::new(),
            session_probability: BTreeMap::new(),
            pending: Vec::new(),
            registry: ClaimRegistry::new(config.claimproof.clone()).map_err(internal)?,
            burned: BTreeMap::new(),
            breached: HashSet::new(),
            summary: SettlementSummary::default(),
        })
    }

    fn allowance(&self) -> u64 {
        let s = &self.config.session;
        (s.app_stake as f64 * s.ttrm as f64 * self.config.claimproof.reward_rate).round() as u64
    }

    fn begin_block(&mut self, h: u64, difficulty: Difficulty) -> Result<(), SimError> {
        self.resolve_pending(h)?;
        self.close_sessions(h)?;
        let start = self.config.session.session_start(h);
        self.session_probability.entry(start).or_insert(difficulty.probability());
        Ok(())
    }

    /// Challenges, proves and settles every claim submitted before `h`.
    fn resolve_pending(&mut self, h: u64) -> Result<(), SimError> {
        let (due, later): (Vec<_>, Vec<_>) = std::mem::take(&mut self.pending).into_iter().partition(|c| {
            self.registry.claim(&c.id).is_some_and(|claim| claim.claim_height < h)
        });
        self.pending = later;
        let bh = block_hash(self.seed, h);
        for PendingClaim { id, servicer } in due {
            let target = self.registry.challenge(&id, h, &bh).map_err(internal)?;
            let claim = self.registry.claim(&id).cloned().ok_or_else(|| internal("claim vanished"))?;
            if claim.root.sum > 0 {
                let reveal = ProofReveal::from_session(&claim, &servicer, &target).map_err(internal)?;
                self.registry.submit_proof(&reveal, h, &self.keys).map_err(internal)?;
            }
            let settlement = self.registry.settle(&id, h).map_err(internal)?;
            self.summary.claims += 1;
            self.summary.claimed_relays += claim.root.sum;
            match settlement.outcome {
                SettlementOutcome::Settled => self.summary.settled += 1,
                SettlementOutcome::ExpiredUnproven => self.summary.expired_unproven += 1,
                SettlementOutcome::InvalidProof => self.summary.invalid_proof += 1,
            }
            self.summary.minted += settlement.minted as u128;
            self.summary.burned += settlement.burned as u128;

            let key = (claim.app.clone(), claim.session_start);
            let allowance = self.allowance();
            let total = self.burned.entry(key.clone()).or_default();
            *total += settlement.burned;
            let total = *total;
            if total > allowance && self.breached.insert(key) {
                self.summary.margin_breaches += 1;
                self.registry.record(Event::MarginBreach {
                    height: h,
                    app: claim.app.clone(),
                    session_start: claim.session_start,
                    burned: total,
                    allowance,
                });
            }
        }
        Ok(())
    }

    /// Submits claims for sessions that ended at or before `h`.
    fn close_sessions(&mut self, h: u64) -> Result<(), SimError> {
        let ended: Vec<String> =
            self.active.iter().filter(|(_, s)| s.header.end_height <= h).map(|(app, _)| app.clone()).collect();
        for app in ended {
            let session = self.active.remove(&app).expect("listed above");
            let p = self.session_probability.get(&session.header.start_height).copied().unwrap_or(1.0);
            for mut servicer in session.servicers {
                let claim = self.registry.submit_claim(&mut servicer, h, p).map_err(internal)?;
                self.pending.push(PendingClaim { id: claim.id, servicer });
            }
        }
        Ok(())
    }

    fn app_key(&mut self, app: &str) -> KeyPair {
        if let Some(k) = self.app_keys.get(app) {
            return k.clone();
        }
        let key = self.keys.issue(Identity::new(app), &self.seed.to_be_bytes());
        self.app_keys.insert(app.to_string(), key.clone());
        let allowance = self.allowance();
        self.registry.ledger_mut().fund(key.id(), allowance);
        key
    }

    fn session_for(&mut self, app: &str, h: u64) -> Result<&mut ActiveSession, SimError> {
        if !self.active.contains_key(app) {
            let app_id = self.app_key(app).id().clone();
            let p = &self.config.session;
            let start = p.session_start(h);
            let header = new_session(
                &block_hash(self.seed, start),
                &app_id,
                &self.service,
                &self.pool,
                p.servicers_per_session,
                start,
                p.window,
            )
            .map_err(internal)?;
            let servicers = header
                .servicers
                .iter()
                .map(|id| ServicerSession::new(self.pool_keys[id].clone(), header.clone(), &self.budget, self.config.claimproof.key_bits))
                .collect::<Result<Vec<_>, _>>()
                .map_err(internal)?;
            self.active.insert(app.to_string(), ActiveSession { header, servicers });
        }
        Ok(self.active.get_mut(app).expect("inserted above"))
    }

    /// Generates `n` signed relays for one servicer slot, exactly the
    /// `collisions` drawn positions of which hash below the threshold, and
    /// runs them through admission. Returns how many reached the trie.
    fn serve_cell(
        &mut self,
        h: u64,
        app: &str,
        slot: usize,
        n: u64,
        collisions: u64,
        difficulty: Difficulty,
    ) -> Result<u64, SimError> {
        let app_key = self.app_key(app);
        let mut prng = substream(self.seed, "payload", &[self.svc_index, h, label_index(app), slot as u64]);
        let colliding: HashSet<usize> =
            rand::seq::index::sample(&mut prng, n as usize, collisions as usize).into_iter().collect();
        let service = self.service.clone();
        let verifier = self.keys.clone();
        let session = self.session_for(app, h)?;
        let header = session.header.clone();
        let servicer = &mut session.servicers[slot];
        let mut inserted = 0;
        for i in 0..n as usize {
            let want = colliding.contains(&i);
            let mut nonce = 0u64;
            let request = loop {
                let request = RelayRequest {
                    app: app_key.id().clone(),
                    service: service.clone(),
                    session_seed: header.seed,
                    session_start: header.start_height,
                    servicer: servicer.id().clone(),
                    height: h,
                    payload: format!("{service}/{h}/{i}/{nonce}"),
                }
                .sign(&app_key);
                let relay = Relay { response: servicer.respond(&request), request };
                if check_collision(&relay.digest(), &difficulty) == want {
                    break relay.request;
                }
                nonce += 1;
            };
            if servicer.handle_relay(&request, &verifier, &difficulty).is_inserted() {
                inserted += 1;
            }
        }
        Ok(inserted)
    }

    /// Advances past the end of the trace until every session has settled.
    fn drain(&mut self, mut h: u64) -> Result<(), SimError> {
        while !self.active.is_empty() || !self.pending.is_empty() {
            self.resolve_pending(h)?;
            self.close_sessions(h)?;
            h += 1;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "height,service_id,relay_count\n10,eth,100\n11,eth,120\n12,eth,90\n";

    #[test]
    fn parses_fixture() {
        let t = parse_trace(FIXTURE).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t[1], TraceBlock { height: 11, service_id: "eth".into(), relay_count: 120, breakdown: vec![] });
        assert_eq!(format_trace(&t), FIXTURE);
    }

    #[test]
    fn rejects_duplicates_and_gaps() {
        let dup = "height,service_id,relay_count\n1,eth,5\n1,eth,6\n";
        match parse_trace(dup) {
            Err(TraceError::Malformed { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("duplicate"));
            }
            other => panic!("{other:?}"),
        }
        let gap = "height,service_id,relay_count\n1,eth,5\n3,eth,6\n";
        assert!(matches!(parse_trace(gap), Err(TraceError::Malformed { line: 3, .. })));
        let bad_sum = "height,service_id,relay_count,app_id,app_count\n1,eth,5,a,4\n";
        assert!(matches!(parse_trace(bad_sum), Err(TraceError::Malformed { line: 2, .. })));
        assert!(parse_trace("h,s,r\n").is_err());
    }

    #[test]
    fn breakdown_and_interleaved_services() {
        let text = "height,service_id,relay_count,app_id,app_count,app_id,app_count\n0,eth,5,a,2,b,3\n0,poly,1,a,1,b,0\n1,eth,4,a,4,b,0\n";
        let t = parse_trace(text).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t[0].breakdown, vec![("a".into(), 2), ("b".into(), 3)]);
        assert_eq!(format_trace(&t), text);
    }

    #[test]
    fn shapes() {
        let flat = synth_trace(TraceShape::Steady, &ShapeParams::preset(TraceShape::Steady), 1).unwrap();
        assert!(flat.iter().all(|b| b.relay_count == 1_000_000));

        let surge = synth_trace(TraceShape::StepSurge, &ShapeParams::preset(TraceShape::StepSurge), 1).unwrap();
        assert_eq!(surge[99].relay_count, 1120);
        assert_eq!(surge[100].relay_count, 276_000);

        let mut p = ShapeParams::preset(TraceShape::StepDrop);
        p.transition_blocks = 3;
        let drop = synth_trace(TraceShape::StepDrop, &p, 1).unwrap();
        assert_eq!(drop[99].relay_count, 273_000);
        assert!(drop[100].relay_count < 273_000 && drop[100].relay_count > 21_000);
        assert_eq!(drop[102].relay_count, 21_000);

        let ramp = synth_trace(TraceShape::SoftSurge, &ShapeParams::preset(TraceShape::SoftSurge), 1).unwrap();
        assert_eq!(ramp[99].relay_count, 2_900_000);
        assert_eq!(ramp[274].relay_count, 11_000_000);
        assert!(ramp.windows(2).all(|w| w[1].relay_count >= w[0].relay_count));
    }

    #[test]
    fn shape_validation() {
        let mut p = ShapeParams::preset(TraceShape::StepSurge);
        p.transition_blocks = 4;
        assert!(synth_trace(TraceShape::StepSurge, &p, 0).is_err());
        let p = ShapeParams::preset(TraceShape::StepSurge);
        assert!(synth_trace(TraceShape::StepDrop, &p, 0).is_err());
        let mut p = ShapeParams::preset(TraceShape::Steady);
        p.noise = -1.0;
        assert!(synth_trace(TraceShape::Steady, &p, 0).is_err());
    }

    #[test]
    fn noisy_trace_is_seeded() {
        let mut p = ShapeParams::preset(TraceShape::Steady);
        p.noise = 0.05;
        let a = synth_trace(TraceShape::Steady, &p, 3).unwrap();
        assert_eq!(a, synth_trace(TraceShape::Steady, &p, 3).unwrap());
        assert_ne!(a, synth_trace(TraceShape::Steady, &p, 4).unwrap());
    }

    #[test]
    fn multinomial_conserves_total() {
        let mut rng = substream(1, "t", &[]);
        for n in [0u64, 1, 7, 1000, 123_456] {
            let split = multinomial(&mut rng, n, &[0.5, 0.25, 0.25]);
            assert_eq!(split.iter().sum::<u64>(), n);
        }
    }

    fn row(c: u64) -> BlockMetrics {
        BlockMetrics {
            height: 0,
            service_id: "s".into(),
            relays: c,
            probability: 1.0,
            claims: c,
            estimate: c as f64,
            r_ema: 0.0,
            target_error_pct: target_error_pct(c, 100),
            volume_error_pct: 0.0,
        }
    }

    #[test]
    fn aggregates_on_target() {
        let a = compute_metrics(&[row(100), row(100)], 100, 0).unwrap();
        assert_eq!(a.mean_target_error_pct, 0.0);
        assert_eq!(a.min_target_error_pct, 0.0);
        assert_eq!(a.max_target_error_pct, 0.0);
        assert_eq!(a.accumulated_target_error_claims, 0);
    }

    #[test]
    fn aggregates_symmetric_pair() {
        let a = compute_metrics(&[row(0), row(200)], 100, 0).unwrap();
        assert_eq!((a.min_target_error_pct, a.max_target_error_pct), (-100.0, 100.0));
        assert_eq!(a.accumulated_target_error_claims, 0);
        assert_eq!((a.min_claims, a.max_claims), (0, 200));
        assert!(matches!(compute_metrics(&[row(1)], 100, 1), Err(SimError::EmptyWindow { .. })));
    }
}
