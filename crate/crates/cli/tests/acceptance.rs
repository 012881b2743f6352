//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Reference values come from independent
//! oracles (brute force, statrs, frozen scipy output, hand-written truth
//! tables), never from the implementation under test.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use chrono::{DateTime, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sentinel_core::confidence::{combine, generation_probability, route, RoutingDecision, RoutingThresholds};
use sentinel_core::gate::{
    decide, evaluate_gate, paired_t_test, student_t_sf, Alternative, GateConfig, GateDecision, GateRejection,
    Registry, RegistryError, Step, COMPLETE_MARKER,
};
use sentinel_core::hitl::{should_train, TriggerConfig, TriggerDecision, TriggerReason, TriggerState};
use sentinel_core::metrics::{ece, ece_from_observations, edit_distance, EvalPair};
use sentinel_core::pipeline::Pipeline;
use sentinel_core::replay::{compose_batch_with, lora_param_count, MixConfig};
use sentinel_core::sim::{
    generate_fleet, prepare, run_cycle, simulate, ErrorModel, Fleet, OperatorModel, SimReport, SimScenario,
};
use sentinel_core::vqa::{latency_report, ComponentTimings, ImageDigest, MockScript, TaskKind};
use sentinel_server::{HttpDriver, ServerHandle};
use statrs::distribution::{ContinuousCDF, StudentsT};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sentinel"))
}

fn cli_stdout(args: &[&str]) -> Result<String, String> {
    let out = cli().args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("sentinel {args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

// ---------------------------------------------------------------- CER

/// Textbook recursive Levenshtein, no memoization.
fn brute_lev(a: &[char], b: &[char]) -> usize {
    match (a, b) {
        ([], _) => b.len(),
        (_, []) => a.len(),
        ([x, ra @ ..], [y, rb @ ..]) if x == y => brute_lev(ra, rb),
        ([_, ra @ ..], [_, rb @ ..]) => 1 + brute_lev(ra, b).min(brute_lev(a, rb)).min(brute_lev(ra, rb)),
    }
}

fn cer_criterion() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let alphabet: Vec<char> = "ABCO0I18".chars().collect();
    for _ in 0..1_000 {
        let word = |rng: &mut ChaCha8Rng| -> Vec<char> {
            let n = rng.random_range(0..=8);
            (0..n).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
        };
        let (a, b) = (word(&mut rng), word(&mut rng));
        let (sa, sb): (String, String) = (a.iter().collect(), b.iter().collect());
        let (got, want) = (edit_distance(&sa, &sb), brute_lev(&a, &b));
        check!(got == want, "d({sa:?}, {sb:?}) = {got}, brute force {want}");
    }
    let elapsed = start.elapsed();
    check!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    check!(edit_distance("ABCO123", "ABC0123") == 1, "ABCO123 vs ABC0123");
    check!(edit_distance("GH345", "GHI3456") == 2, "GH345 vs GHI3456");

    // Two failure cases plus one exact read through the `eval` subcommand.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("pairs.jsonl");
    let lines = [
        EvalPair::new("ABCO123", "ABC0123", 0.45),
        EvalPair::new("GH345", "GHI3456", 0.62),
        EvalPair::new("XYZ7890", "XYZ7890", 0.97),
    ]
    .map(|p| serde_json::to_string(&p).unwrap())
    .join("\n");
    std::fs::write(&path, lines).map_err(|e| e.to_string())?;
    let report: serde_json::Value =
        serde_json::from_str(&cli_stdout(&["eval", path.to_str().unwrap()])?).map_err(|e| e.to_string())?;
    let want_cer = (2.0 / 7.0 + 1.0 / 7.0 + 0.0) / 3.0;
    let (cer, acc) = (report["cer"].as_f64().unwrap(), report["accuracy"].as_f64().unwrap());
    check!((cer - want_cer).abs() < 1e-12, "eval cer {cer}, want {want_cer}");
    check!((acc - 1.0 / 3.0).abs() < 1e-12, "eval accuracy {acc}");
    Ok(format!("1000 pairs match brute force in {elapsed:.2?}; fixtures 1 and 2; eval CER {cer:.4}, accuracy 1/3"))
}

// ---------------------------------------------------------------- ECE

fn ece_criterion() -> Outcome {
    // Bin b holds 20 predictions at confidence (2b+1)/20, of which 2b+1 are correct.
    let mut calibrated = Vec::new();
    for b in 0..10 {
        let c = (2 * b + 1) as f64 / 20.0;
        calibrated.extend((0..20).map(|i| (c, i < 2 * b + 1)));
    }
    let (e, _) = ece_from_observations(&calibrated, 10).map_err(|e| e.to_string())?;
    check!(e < 1e-9, "calibrated ECE {e}");

    let (single, _) = ece(&[EvalPair::new("AAA111", "AAA112", 0.8)], 10).map_err(|e| e.to_string())?;
    check!(single == 0.8, "single wrong at 0.8 gives {single}");

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1_000 {
        let n = rng.random_range(1..200);
        let obs: Vec<(f64, bool)> = (0..n).map(|_| (rng.random_range(0.0..=1.0), rng.random_bool(0.5))).collect();
        let (e, _) = ece_from_observations(&obs, rng.random_range(1..25)).map_err(|e| e.to_string())?;
        check!((0.0..=1.0).contains(&e), "ECE {e} outside [0, 1]");
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("log.jsonl");
    let log: Vec<String> =
        calibrated.iter().map(|(c, ok)| format!("{{\"confidence\": {c}, \"correct\": {ok}}}")).collect();
    std::fs::write(&path, log.join("\n")).map_err(|e| e.to_string())?;
    let report: serde_json::Value =
        serde_json::from_str(&cli_stdout(&["calibrate", path.to_str().unwrap()])?).map_err(|e| e.to_string())?;
    let cli_ece = report["ece"].as_f64().unwrap();
    check!(cli_ece < 1e-9, "calibrate ECE {cli_ece}");
    Ok(format!("calibrated {e:.1e} (calibrate CLI {cli_ece:.1e}); single wrong 0.8 = {single}; 1000 random sets in [0,1]"))
}

// ---------------------------------------------------------------- confidence

fn confidence_criterion() -> Outcome {
    let c = combine(0.9, 0.3, 1.0).map_err(|e| e.to_string())?.combined;
    check!((c - 0.63).abs() <= 1e-12, "combine(0.9, 0.3, 1.0) = {c}");
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let f = |g, u, v| combine(g, u, v).unwrap().combined;
    for _ in 0..10_000 {
        let (g, u, v) = (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
        let base = f(g, u, v);
        let (g2, u2, v2) = (rng.random_range(g..=1.0), rng.random_range(u..=1.0), rng.random_range(v..=1.0));
        check!(f(g2, u, v) >= base, "not monotone in generation prob at ({g}, {u}, {v})");
        check!(f(g, u2, v) <= base, "not antitone in penalty at ({g}, {u}, {v})");
        check!(f(g, u, v2) >= base, "not monotone in validity at ({g}, {u}, {v})");
        check!((0.0..=1.0).contains(&base), "combined {base} outside [0, 1]");
    }
    Ok(format!("combine(0.9,0.3,1.0) = {c}; monotone over 10000 random triples"))
}

// ---------------------------------------------------------------- routing

fn routing_criterion() -> Outcome {
    use RoutingDecision::*;
    let t = RoutingThresholds::default();
    let table = [
        (0.96, AutoAccept),
        (0.82, HumanReview),
        (0.45, AutoReject),
        (1.0, AutoAccept),
        (0.95, AutoAccept),
        (0.949_999_999_999, HumanReview),
        (0.70, HumanReview),
        (0.699_999_999_999, AutoReject),
        (0.0, AutoReject),
    ];
    for (c, want) in table {
        for _ in 0..3 {
            let got = route(c, &t);
            check!(got == want, "route({c}) = {got:?}, want {want:?}");
        }
    }
    Ok(format!("{} fixtures incl. 0.95 / 0.70 boundaries, repeated identically", table.len()))
}

// ---------------------------------------------------------------- trigger

fn trigger_criterion() -> Outcome {
    use TriggerDecision::*;
    use TriggerReason::*;
    let now = Utc.with_ymd_and_hms(2026, 1, 1, 12, 0, 0).unwrap();
    let ago = |h: f64| Some(now - chrono::Duration::milliseconds((h * 3_600_000.0).round() as i64));
    let st = |pending, hours: Option<f64>, base: Option<f64>, cur: Option<f64>| TriggerState {
        pending_count: pending,
        oldest_pending_at: hours.and_then(ago),
        baseline_accuracy: base,
        current_accuracy: cur,
    };
    let rows: Vec<(&str, TriggerState, TriggerDecision)> = vec![
        ("pending 500", st(500, Some(0.1), None, None), Train(BufferFull)),
        ("pending 50, 5h", st(50, Some(5.0), None, None), Train(TimeElapsed)),
        ("pending 49, 100h", st(49, Some(100.0), Some(0.9), Some(0.9)), NoTrain),
        ("drop 0.92 -> 0.85, pending 3", st(3, Some(0.5), Some(0.92), Some(0.85)), Train(AccuracyDrop)),
        ("pending 499, 1h", st(499, Some(1.0), None, None), NoTrain),
        ("pending 499, 4h", st(499, Some(4.0), None, None), Train(TimeElapsed)),
        ("pending 500, 4h, drop", st(500, Some(4.0), Some(0.9), Some(0.5)), Train(BufferFull)),
        ("pending 501", st(501, None, None, None), Train(BufferFull)),
        ("pending 50, 3.99h", st(50, Some(3.99), None, None), NoTrain),
        ("pending 50, 4h", st(50, Some(4.0), None, None), Train(TimeElapsed)),
        ("pending 49, 4h", st(49, Some(4.0), None, None), NoTrain),
        ("pending 50, 4h, drop", st(50, Some(4.0), Some(0.9), Some(0.5)), Train(TimeElapsed)),
        ("drop 0.05 exactly", st(10, Some(1.0), Some(0.92), Some(0.87)), NoTrain),
        ("drop 0.0501", st(10, Some(1.0), Some(0.92), Some(0.8699)), Train(AccuracyDrop)),
        ("drop 0.0501, pending 0", st(0, None, Some(0.92), Some(0.8699)), NoTrain),
        ("drop without baseline", st(10, Some(1.0), None, Some(0.1)), NoTrain),
        ("empty", st(0, None, None, None), NoTrain),
    ];
    let config = TriggerConfig::default();
    for (name, state, want) in &rows {
        let got = should_train(state, &config, now);
        check!(got == *want, "{name}: {got:?}, want {want:?}");
    }
    Ok(format!("{} truth-table rows exact (49/50/499/500, 3.99h/4h, 0.05/0.0501)", rows.len()))
}

// ---------------------------------------------------------------- replay

fn replay_criterion() -> Outcome {
    let start = Instant::now();
    let mix = MixConfig { lambda: 0.30, batch_size: 32 };
    let (n_corr, n_replay) = (40usize, 300usize);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut c_counts = vec![0u64; n_corr];
    let mut r_counts = vec![0u64; n_replay];
    for i in 0..10_000 {
        let b = compose_batch_with(n_replay, n_corr, &mix, &mut rng).map_err(|e| e.to_string())?;
        check!(b.corrections.len() == 10, "batch {i}: {} correction slots", b.corrections.len());
        check!(b.replay.len() == 22, "batch {i}: {} replay slots", b.replay.len());
        b.corrections.iter().for_each(|&j| c_counts[j] += 1);
        b.replay.iter().for_each(|&j| r_counts[j] += 1);
    }
    let mut details = Vec::new();
    for (name, counts) in [("corrections", &c_counts), ("replay", &r_counts)] {
        let total: u64 = counts.iter().sum();
        let expected = total as f64 / counts.len() as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let df = (counts.len() - 1) as f64;
        let z = (chi2 - df) / (2.0 * df).sqrt();
        check!(z.abs() <= 3.0, "{name}: chi2 {chi2:.1} on {df} df is {z:.2} sigma out");
        details.push(format!("{name} chi2 {chi2:.1}/{df} df ({z:+.2} sigma)"));
    }
    let elapsed = start.elapsed();
    check!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("10000 batches, 10 correction slots each; {}; {elapsed:.2?}", details.join(", ")))
}

// ---------------------------------------------------------------- LoRA

fn lora_criterion() -> Outcome {
    // layers x modules x 2 (A and B) x hidden dim x rank
    for (layers, want) in [(18u64, 8_257_536u64), (32, 14_680_064)] {
        check!(layers * 7 * 2 * 2048 * 16 == want, "oracle arithmetic for {layers} layers");
        let got = lora_param_count(layers, 7, 2048, 16).map_err(|e| e.to_string())?;
        check!(got == want, "lora_param_count({layers},7,2048,16) = {got}, want {want}");
        let printed = cli_stdout(&["lora-params", "--layers", &layers.to_string(), "--modules", "7", "--dim", "2048", "--rank", "16"])?;
        check!(printed.trim() == want.to_string(), "lora-params printed {printed:?}");
    }
    Ok("(18,7,2048,16) = 8257536 and (32,7,2048,16) = 14680064 via library and CLI".into())
}

// ---------------------------------------------------------------- t-test

/// One-sided `scipy.stats.t.sf(t, df)`, computed once and frozen.
const SCIPY_T_SF: [(f64, f64, f64); 20] = [
    (2.0, 9.0, 0.03827641188535047),
    (3.138, 4.0, 0.01745746763953539),
    (0.0, 5.0, 0.5),
    (1.0, 1.0, 0.24999999999999978),
    (-1.5, 7.0, 0.911350756505015),
    (0.5, 2.0, 0.33333333333333337),
    (1.833, 9.0, 0.05000897002529153),
    (2.262, 9.0, 0.025006422751227275),
    (2.5, 30.0, 0.009057824534033353),
    (4.0, 3.0, 0.014004228005073078),
    (-3.0, 12.0, 0.9944666521569832),
    (1.96, 1000.0, 0.025136592477874354),
    (0.1, 50.0, 0.46037210682648505),
    (6.0, 8.0, 0.0001616966109425744),
    (1.2, 15.0, 0.12437489369401128),
    (2.8, 20.0, 0.005528536269414689),
    (-0.7, 4.0, 0.738749917203275),
    (10.0, 2.0, 0.004926228511662846),
    (1.645, 120.0, 0.05129344057441822),
    (3.5, 60.0, 0.0004419556826664631),
];

fn ttest_criterion() -> Outcome {
    let mut worst = 0.0f64;
    for (t, df, want) in SCIPY_T_SF {
        let got = student_t_sf(t, df);
        let statrs = 1.0 - StudentsT::new(0.0, 1.0, df).unwrap().cdf(t);
        check!((got - want).abs() <= 1e-3, "sf({t}, {df}) = {got}, scipy {want}");
        check!((got - statrs).abs() <= 1e-3, "sf({t}, {df}) = {got}, statrs {statrs}");
        worst = worst.max((got - want).abs());
    }
    let r = paired_t_test(&[0.02, 0.01, 0.03, 0.00, 0.02], Alternative::Greater).map_err(|e| e.to_string())?;
    let t = r.t_statistic.unwrap_or(f64::NAN);
    check!((t - 3.1378581622109447).abs() < 1e-9, "t = {t}");
    check!((r.p_value - 0.017459853337269522).abs() <= 1e-3, "p = {}", r.p_value);
    let zero = paired_t_test(&[0.0; 6], Alternative::Greater).map_err(|e| e.to_string())?;
    check!(zero.p_value == 1.0, "all-zero deltas p = {}", zero.p_value);

    // Deploy / not significant / forgetting.
    let cfg = GateConfig::default();
    let prod = [0.0; 20];
    let mut better = [0.0; 20];
    better[..8].fill(1.0);
    let mut mixed = [0.0; 20];
    mixed[..3].fill(1.0);
    let mut prod_mixed = [0.0; 20];
    prod_mixed[3..5].fill(1.0);
    let scenarios = [
        ("deploy", evaluate_gate(&prod, &better, 0.95, 0.94, &cfg), GateDecision::Deploy),
        (
            "not significant",
            evaluate_gate(&prod_mixed, &mixed, 0.95, 0.95, &cfg),
            GateDecision::Reject(GateRejection::NotSignificant),
        ),
        ("forgetting", evaluate_gate(&prod, &better, 0.95, 0.92, &cfg), GateDecision::Reject(GateRejection::Forgetting)),
    ];
    for (name, report, want) in scenarios {
        let report = report.map_err(|e| e.to_string())?;
        check!(report.decision == want, "{name}: {:?} (p {}, drop {})", report.decision, report.p_value, report.forgetting_drop);
    }
    check!(decide(0.01, 0.01, &cfg) == GateDecision::Deploy, "decide(0.01, 0.01)");
    check!(decide(0.20, 0.0, &cfg) == GateDecision::Reject(GateRejection::NotSignificant), "decide(0.20, 0)");
    check!(decide(0.01, 0.03, &cfg) == GateDecision::Reject(GateRejection::Forgetting), "decide(0.01, 0.03)");
    Ok(format!(
        "20 (t, df) pairs within {worst:.1e} of scipy and statrs; sf(2.0, 9) = {:.4}; three gate scenarios",
        student_t_sf(2.0, 9.0)
    ))
}

// ---------------------------------------------------------------- atomicity

fn tagged(tag: &str) -> MockScript {
    let mut s = MockScript::default();
    s.insert(&ImageDigest::of_bytes(tag.as_bytes()), TaskKind::PlateRecognition, tag, vec![0.9]).unwrap();
    s
}

/// v1 bootstrap, v2 active, v3 published.
fn registry_fixture(root: &Path) {
    let at = Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap();
    let pass = evaluate_gate(&[0.0; 10], &[1.0; 10], 0.9, 0.9, &GateConfig::default()).unwrap();
    let reg = Registry::open(root).unwrap();
    let v1 = reg.publish(&tagged("V1"), None, at).unwrap();
    reg.activate_bootstrap(v1.version).unwrap();
    let v2 = reg.publish(&tagged("V2"), Some(&pass), at).unwrap();
    reg.activate(v2.version).unwrap();
    reg.publish(&tagged("V3"), Some(&pass), at).unwrap();
}

fn resolves_complete(root: &Path) -> Result<u64, String> {
    let target = std::fs::canonicalize(root.join("current")).map_err(|e| format!("current dangles: {e}"))?;
    check!(target.join(COMPLETE_MARKER).is_file(), "current -> {} has no marker", target.display());
    let name = target.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    name.trim_start_matches('v').parse().map_err(|_| format!("current -> {name}"))
}

fn crash_at(step: Step, fired: Arc<AtomicBool>) -> sentinel_core::gate::FaultHook {
    Arc::new(move |s| {
        let hit = s == step;
        if hit {
            fired.store(true, Ordering::SeqCst);
        }
        hit
    })
}

fn atomicity_criterion() -> Outcome {
    let mut points = 0;
    let plans: [(&str, bool, &[Step]); 3] =
        [("activate", false, &Step::ACTIVATE), ("rollback/rename", false, &Step::ROLLBACK_RENAME), ("rollback/exchange", true, &Step::ROLLBACK_EXCHANGE)];
    let mut exchange_supported = true;
    for (op, exchange, steps) in plans {
        for &step in steps {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            registry_fixture(dir.path());
            let fired = Arc::new(AtomicBool::new(false));
            let reg = Registry::open(dir.path())
                .map_err(|e| e.to_string())?
                .with_exchange(exchange)
                .with_fault_hook(crash_at(step, fired.clone()));
            let result = if op == "activate" { reg.activate(3) } else { reg.rollback().map(|_| ()) };
            drop(reg);
            if !fired.load(Ordering::SeqCst) {
                check!(exchange && result.is_ok(), "{op}: crash point {step:?} never reached");
                exchange_supported = false;
                continue;
            }
            check!(matches!(result, Err(RegistryError::InjectedCrash(s)) if s == step), "{op} {step:?}: {result:?}");
            let reg = Registry::open(dir.path()).map_err(|e| format!("{op} {step:?}: reopen: {e}"))?;
            let cur = resolves_complete(dir.path()).map_err(|e| format!("{op} {step:?}: {e}"))?;
            let allowed: &[u64] = if op == "activate" { &[2, 3] } else { &[1, 2] };
            check!(allowed.contains(&cur), "{op} {step:?}: current v{cur}");
            check!(reg.current_version().ok().flatten() == Some(cur), "{op} {step:?}: index disagrees with link");
            points += 1;
        }
    }
    for exchange in [false, true] {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        registry_fixture(dir.path());
        let reg = Registry::open(dir.path()).map_err(|e| e.to_string())?.with_exchange(exchange);
        let before = (reg.current_version().unwrap(), reg.previous_version().unwrap());
        reg.rollback().map_err(|e| e.to_string())?;
        reg.rollback().map_err(|e| e.to_string())?;
        let after = (reg.current_version().unwrap(), reg.previous_version().unwrap());
        check!(before == after, "rollback twice: {before:?} -> {after:?}");
        check!(resolves_complete(dir.path())? == 2, "rollback twice left current elsewhere");
    }
    let note = if exchange_supported { "" } else { " (RENAME_EXCHANGE unavailable; rename path covered)" };
    Ok(format!("{points} crash points, current always COMPLETE; rollback twice is identity{note}"))
}

// ---------------------------------------------------------------- closed loop

fn default_run() -> &'static Result<(SimScenario, SimReport, Duration), String> {
    static RUN: OnceLock<Result<(SimScenario, SimReport, Duration), String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let s = SimScenario::default();
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let start = Instant::now();
        let report = simulate(&s, dir.path()).map_err(|e| e.to_string())?;
        Ok((s, report, start.elapsed()))
    })
}

/// Replays the trigger rules over the generated fleet with exact integer
/// accuracy arithmetic. Deployments (which reset the accuracy window) are
/// taken from the report, since the gate outcome is not part of the count.
fn predicted_triggers(s: &SimScenario, fleet: &Fleet, deployed: &[bool]) -> Vec<(usize, TriggerReason)> {
    let cfg = &s.trigger;
    let auto_accept = s.routing.auto_accept();
    let min_quality = s.quality.min_quality;
    let mut pending: Vec<DateTime<Utc>> = Vec::new();
    let mut window: VecDeque<bool> = VecDeque::new();
    let mut since_swap = 0usize;
    let mut baseline: Option<(usize, usize)> = None;
    let mut fired = Vec::new();
    for v in &fleet.traffic {
        let g = generation_probability(&v.plate_token_probs).unwrap();
        let combined = combine(g, v.hedge_penalty, v.format_validity).unwrap().combined;
        if combined >= auto_accept {
            continue;
        }
        let wrong = v.plate_error.is_some();
        let corrected = wrong && !v.operator_slip;
        if corrected {
            if v.image.quality_score < min_quality {
                continue; // rejected, no review recorded
            }
            pending.push(v.at);
        }
        if window.len() == s.monitor.window_size {
            window.pop_front();
        }
        window.push_back(!corrected);
        since_swap += 1;
        let hits = window.iter().filter(|&&ok| ok).count();
        if baseline.is_none() && since_swap >= s.monitor.baseline_warmup {
            baseline = Some((hits, window.len()));
        }
        let n = pending.len();
        let elapsed_ok = pending.first().is_some_and(|&t| {
            (v.at - t).num_milliseconds() as f64 >= cfg.time_threshold_hours * 3_600_000.0
        });
        // (hb/nb) - (h/n) > d  <=>  (hb*n - h*nb) > d*n*nb, with d = 1/20.
        let dropped = baseline.is_some_and(|(hb, nb)| {
            assert_eq!(cfg.accuracy_drop_threshold, 0.05);
            20 * (hb * window.len()) as i64 - 20 * (hits * nb) as i64 > (window.len() * nb) as i64
        });
        let reason = if n >= cfg.max_corrections {
            Some(TriggerReason::BufferFull)
        } else if n >= cfg.min_corrections && elapsed_ok {
            Some(TriggerReason::TimeElapsed)
        } else if n >= 1 && dropped {
            Some(TriggerReason::AccuracyDrop)
        } else {
            None
        };
        if let Some(r) = reason {
            if deployed.get(fired.len()).copied().unwrap_or(false) {
                window.clear();
                since_swap = 0;
                baseline = None;
            }
            fired.push((v.index, r));
            pending.clear();
        }
    }
    fired
}

fn closed_loop_criterion() -> Outcome {
    let (s, report, took) = default_run().as_ref().map_err(|e| e.clone())?;
    check!(*took < Duration::from_secs(60), "simulation took {took:?}");
    let fleet = generate_fleet(s).map_err(|e| e.to_string())?;
    let induced = fleet.traffic.iter().filter(|v| v.plate_error.is_some()).count();
    check!(induced >= 500, "only {induced} induced errors");
    let deployed: Vec<bool> = report.jobs.iter().map(|j| j.deployed).collect();
    let want = predicted_triggers(s, &fleet, &deployed);
    let got: Vec<(usize, TriggerReason)> = report.triggers.iter().map(|t| (t.vehicle_index, t.reason)).collect();
    check!(!want.is_empty(), "oracle predicts no trigger");
    check!(got == want, "triggers {got:?}\n  oracle {want:?}");

    // Dense, error-heavy traffic with a sloppy operator reaches the other two reasons.
    let burst = SimScenario {
        interval_secs: 5,
        error_model: ErrorModel { substitution_rate: 0.3, ..s.error_model.clone() },
        operator: OperatorModel { error_rate: 0.05, ..s.operator },
        ..s.clone()
    };
    let burst_fleet = generate_fleet(&burst).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let br = simulate(&burst, dir.path()).map_err(|e| e.to_string())?;
    let deployed: Vec<bool> = br.jobs.iter().map(|j| j.deployed).collect();
    let want_b = predicted_triggers(&burst, &burst_fleet, &deployed);
    let got_b: Vec<(usize, TriggerReason)> = br.triggers.iter().map(|t| (t.vehicle_index, t.reason)).collect();
    check!(got_b == want_b, "burst triggers {got_b:?}\n  oracle {want_b:?}");
    let mut reasons = std::collections::BTreeMap::new();
    for (_, r) in got.iter().chain(&got_b) {
        *reasons.entry(format!("{r:?}")).or_insert(0) += 1;
    }
    check!(reasons.len() == 3, "only reasons {reasons:?} exercised");

    let drop_30 = report.probe.max_job_drop.unwrap_or(f64::NAN);
    check!(drop_30 <= 0.02, "lambda 0.30: max probe drop {drop_30}");
    let post = report.post_retrain_accuracy.unwrap_or(f64::NAN);
    check!(post == 1.0, "post-retrain accuracy on corrected digests {post}");

    let no_replay = SimScenario { mix: MixConfig { lambda: 1.0, ..s.mix }, ..s.clone() };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let r1 = simulate(&no_replay, dir.path()).map_err(|e| e.to_string())?;
    let took_1 = start.elapsed();
    check!(took_1 < Duration::from_secs(60), "lambda 1.0 simulation took {took_1:?}");
    let first = r1.jobs.first().ok_or("lambda 1.0: no retraining job")?;
    let share = first.replay_share.unwrap_or(f64::NAN);
    let drop_100 = first.forgetting_drop.unwrap_or(f64::NAN);
    check!(share == 0.0, "lambda 1.0: first job replay share {share}");
    check!(drop_100 > 0.02, "lambda 1.0: first job probe drop {drop_100}");
    Ok(format!(
        "n={} in {took:.1?}: {} + {} burst triggers match oracle {reasons:?} ({induced} induced errors); probe drop {drop_30:.4} at replay 0.70 vs {drop_100:.4} at 0.0; post-retrain accuracy {post}",
        report.n_vehicles,
        got.len(),
        got_b.len()
    ))
}

// ---------------------------------------------------------------- latency

fn latency_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(148);
    let mut sets: Vec<Vec<f64>> = vec![vec![148.0], vec![120.0, 300.0], (1..=100).map(f64::from).collect()];
    for n in [7usize, 20, 99, 101, 1000] {
        sets.push((0..n).map(|_| rng.random_range(80.0..600.0)).collect());
    }
    for set in &sets {
        let samples: Vec<ComponentTimings> =
            set.iter().map(|&g| ComponentTimings { generate: g, ..Default::default() }).collect();
        let r = latency_report(&samples).map_err(|e| e.to_string())?;
        let mut sorted = set.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        // Smallest sample with at least pct% of the set at or below it.
        let oracle = |pct: f64| {
            sorted
                .iter()
                .copied()
                .find(|&v| sorted.iter().filter(|&&w| w <= v).count() as f64 * 100.0 >= pct * sorted.len() as f64)
                .unwrap()
        };
        let p = r.percentiles;
        let want = [oracle(50.0), oracle(90.0), oracle(95.0), oracle(99.0)];
        check!([p.p50, p.p90, p.p95, p.p99] == want, "n={}: {:?} vs oracle {want:?}", set.len(), p);
        check!(p.p50 <= p.p90 && p.p90 <= p.p95 && p.p95 <= p.p99, "not monotone: {p:?}");
    }
    Ok(format!("{} fixed sets match the sort oracle exactly; p50 <= p90 <= p95 <= p99", sets.len()))
}

// ---------------------------------------------------------------- HTTP

fn http_criterion() -> Outcome {
    let (s, local, _) = default_run().as_ref().map_err(|e| e.clone())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fleet = generate_fleet(s).map_err(|e| e.to_string())?;
    let config = prepare(s, &fleet, dir.path()).map_err(|e| e.to_string())?;
    let server = ServerHandle::start(Pipeline::open(config).map_err(|e| e.to_string())?, "127.0.0.1:0")
        .map_err(|e| e.to_string())?;
    let start = Instant::now();
    let mut driver = HttpDriver::new(&server.url()).map_err(|e| e.to_string())?;
    let remote = run_cycle(s, &fleet, &mut driver).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    server.shutdown().map_err(|e| e.to_string())?;
    let (a, b) = (local.to_json(), remote.to_json());
    if a != b {
        let line = a.lines().zip(b.lines()).position(|(x, y)| x != y).unwrap_or(0);
        return Err(format!("reports differ from line {}: {:?} vs {:?}", line + 1, a.lines().nth(line), b.lines().nth(line)));
    }
    Ok(format!("{} vehicles over HTTP in {took:.1?}; SimReport identical ({} bytes)", remote.n_vehicles, b.len()))
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("edit distance / CER", cer_criterion),
        ("ECE", ece_criterion),
        ("confidence formula", confidence_criterion),
        ("routing thresholds", routing_criterion),
        ("trigger engine", trigger_criterion),
        ("replay composition", replay_criterion),
        ("LoRA arithmetic", lora_criterion),
        ("paired t-test and gate", ttest_criterion),
        ("deployment atomicity", atomicity_criterion),
        ("closed-loop simulation", closed_loop_criterion),
        ("latency percentiles", latency_criterion),
        ("service round-trip", http_criterion),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, run) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
