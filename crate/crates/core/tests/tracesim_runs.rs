use relay_mining::claimproof::Event;
use relay_mining::config::{Config, SimMode};
use relay_mining::tracesim::{
    compute_metrics, format_trace, load_trace, parse_trace, run_simulation, synth_trace, write_metrics_csv,
    BlockMetrics, ShapeParams, TraceBlock, TraceShape,
};

fn flat_trace(service: &str, blocks: u64, relays: u64) -> Vec<TraceBlock> {
    (0..blocks)
        .map(|h| TraceBlock { height: h, service_id: service.into(), relay_count: relays, breakdown: vec![] })
        .collect()
}

fn small_full_config(p: f64) -> Config {
    let mut c = Config::default();
    c.sim.mode = SimMode::Full;
    c.sim.fixed_probability = Some(p);
    c.sim.servicer_pool = 12;
    c
}

#[test]
fn fast_and_full_agree_on_claims() {
    let trace = flat_trace("eth", 12, 834);
    let full_cfg = small_full_config(0.01);
    let mut fast_cfg = full_cfg.clone();
    fast_cfg.sim.mode = SimMode::Fast;
    let full = run_simulation(&trace, &full_cfg).unwrap();
    let fast = run_simulation(&trace, &fast_cfg).unwrap();
    assert_eq!(full.claims(), fast.claims());
    let fe: Vec<f64> = full.blocks().iter().map(|b| b.estimate).collect();
    let se: Vec<f64> = fast.blocks().iter().map(|b| b.estimate).collect();
    assert_eq!(fe, se);
    assert!(full.claims().iter().sum::<u64>() > 0);
}

#[test]
fn full_mode_settles_every_claim() {
    let trace = flat_trace("eth", 12, 834);
    let out = run_simulation(&trace, &small_full_config(0.01)).unwrap();
    let summary = out.services[0].settlement.clone().unwrap();
    // 3 sessions x 12 servicers.
    assert_eq!(summary.claims, 36);
    assert_eq!(summary.settled, 36);
    assert_eq!(summary.expired_unproven + summary.invalid_proof, 0);
    assert_eq!(summary.minted, summary.burned);
    assert_eq!(summary.claimed_relays, out.claims().iter().sum::<u64>());
    // Settled reward is the claimed count scaled by 1/p.
    assert_eq!(summary.minted, summary.claimed_relays as u128 * 100);

    let events = out.events();
    let claims = events.iter().filter(|e| matches!(e, Event::Claim { .. })).count();
    let settlements = events.iter().filter(|e| matches!(e, Event::Settlement { .. })).count();
    assert_eq!((claims, settlements), (36, 36));
    assert!(events.windows(2).all(|w| w[0].height() <= w[1].height()));
}

#[test]
fn full_mode_flags_margin_breach() {
    let mut cfg = small_full_config(1.0);
    cfg.session.app_stake = 10;
    cfg.session.ttrm = 10;
    // b = 10 * 10 * 1.2 / 12 = 10 per servicer; allowance = 100 per session.
    let out = run_simulation(&flat_trace("eth", 4, 60), &cfg).unwrap();
    let summary = out.services[0].settlement.clone().unwrap();
    assert_eq!(summary.claimed_relays, 120);
    assert_eq!(summary.margin_breaches, 1);
    // Reported once, by the settlement that first pushes burns past the allowance.
    let breaches: Vec<u64> = out
        .events()
        .iter()
        .filter_map(|e| match e {
            Event::MarginBreach { burned, allowance: 100, .. } => Some(*burned),
            _ => None,
        })
        .collect();
    assert_eq!(breaches, [110]);
}

#[test]
fn simulation_is_deterministic_and_seeded() {
    let params = ShapeParams { noise: 0.02, ..ShapeParams::preset(TraceShape::StepSurge) };
    let trace = synth_trace(TraceShape::StepSurge, &params, 4).unwrap();
    let cfg = Config::default();
    let a = run_simulation(&trace, &cfg).unwrap();
    let b = run_simulation(&trace, &cfg).unwrap();
    assert_eq!(a.blocks(), b.blocks());
    let mut other = cfg.clone();
    other.sim.seed += 1;
    assert_ne!(a.claims(), run_simulation(&trace, &other).unwrap().claims());
}

#[test]
fn services_are_independent() {
    let mut trace = flat_trace("eth", 60, 200_000);
    trace.extend(flat_trace("poly", 60, 50_000));
    trace.sort_by_key(|b| b.height);
    let text = format_trace(&trace);
    let parsed = parse_trace(&text).unwrap();
    let cfg = Config::default();
    let both = run_simulation(&parsed, &cfg).unwrap();
    let alone = run_simulation(&flat_trace("poly", 60, 50_000), &cfg).unwrap();
    let poly: Vec<BlockMetrics> = both.blocks().into_iter().filter(|b| b.service_id == "poly").collect();
    assert_eq!(poly, alone.blocks());
    assert_eq!(both.services.len(), 2);
}

#[test]
fn breakdown_drives_the_app_split() {
    let text = "height,service_id,relay_count,app_id,app_count,app_id,app_count\n\
                0,eth,900,app-a,600,app-b,300\n1,eth,900,app-a,600,app-b,300\n\
                2,eth,900,app-a,600,app-b,300\n3,eth,900,app-a,600,app-b,300\n";
    let trace = parse_trace(text).unwrap();
    let mut full = small_full_config(0.05);
    full.sim.servicer_pool = 24;
    let out = run_simulation(&trace, &full).unwrap();
    let apps: std::collections::BTreeSet<String> = out
        .events()
        .iter()
        .filter_map(|e| match e {
            Event::Claim { app, .. } => Some(app.0.clone()),
            _ => None,
        })
        .collect();
    assert_eq!(apps.into_iter().collect::<Vec<_>>(), ["app-a", "app-b"]);
    let mut fast = full.clone();
    fast.sim.mode = SimMode::Fast;
    assert_eq!(out.claims(), run_simulation(&trace, &fast).unwrap().claims());
}

#[test]
fn fixture_trace_round_trips() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/trace_small.csv");
    let trace = load_trace(path).unwrap();
    assert_eq!(trace.len(), 3);
    assert_eq!(format_trace(&trace), std::fs::read_to_string(path).unwrap());
    let out = run_simulation(&trace, &Config::default()).unwrap();
    // Below target relay mining stays off and every relay is a claim.
    assert_eq!(out.claims(), vec![100, 120, 90]);
}

/// Naive recomputation of the aggregates from the CSV text.
#[test]
fn aggregates_match_spreadsheet_recomputation() {
    let trace = synth_trace(TraceShape::StepDrop, &ShapeParams::preset(TraceShape::StepDrop), 9).unwrap();
    let cfg = Config::default();
    let out = run_simulation(&trace, &cfg).unwrap();
    let agg = compute_metrics(&out.blocks(), 10_000, 30).unwrap();

    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &out.blocks()).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let rows: Vec<Vec<String>> = text.lines().skip(1 + 30).map(|l| l.split(',').map(String::from).collect()).collect();
    let claims: Vec<f64> = rows.iter().map(|r| r[4].parse().unwrap()).collect();
    let vol: Vec<f64> = rows.iter().map(|r| r[8].parse().unwrap()).collect();
    let te: Vec<f64> = claims.iter().map(|c| (c - 10_000.0) / 10_000.0 * 100.0).collect();

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(1.0);
    assert_eq!(agg.blocks_evaluated, rows.len());
    assert!(close(agg.mean_target_error_pct, mean(&te)));
    assert!(close(agg.min_target_error_pct, te.iter().cloned().fold(f64::MAX, f64::min)));
    assert!(close(agg.max_target_error_pct, te.iter().cloned().fold(f64::MIN, f64::max)));
    assert!(close(agg.mean_volume_error_pct, mean(&vol)));
    assert!(close(agg.max_volume_error_pct, vol.iter().cloned().fold(f64::MIN, f64::max)));
    let acc: f64 = claims.iter().map(|c| c - 10_000.0).sum();
    assert_eq!(agg.accumulated_target_error_claims as f64, acc);
    assert!(close(agg.accumulated_target_error_per_block, acc / rows.len() as f64));
}

#[test]
fn full_mode_rejects_oversized_traces() {
    let err = run_simulation(&flat_trace("eth", 10, 1_000_000), &small_full_config(0.01)).unwrap_err();
    assert!(err.to_string().contains("sim.mode"), "{err}");
}
