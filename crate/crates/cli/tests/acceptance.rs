//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! Runs with `harness = false`; the slowest part is the 20-trial
//! aggregation sweep, a few minutes on one core.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use drift_core::baselines::{compare_on_traces, CompareConfig};
use drift_core::data::{default_presets, synth_degradation, DeviceTrace, Normalizer};
use drift_core::edgecloud::{aggregation_experiment, run_scenario_with, EventKind, ModelSnapshot, ScenarioSpec, SimReport};
use drift_core::metrics::{error_at_5pct, DevicePrediction, DETECTION_THRESHOLD};
use drift_core::network::{lstm_cell_step, rnn_cell_step, NetConfig};
use drift_core::training::{evaluate_windows, train_holdout, TrainConfig};

const SEED: u64 = 42;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn presets() -> Vec<DeviceTrace> {
    default_presets()
        .iter()
        .map(|p| synth_degradation(&p.id, &p.params).unwrap())
        .collect()
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        worst = worst.max(common::gradient_error(seed, false));
        worst = worst.max(common::gradient_error(seed, true));
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-4 && elapsed < Duration::from_secs(30),
        format!("20 seeds, teacher-forced and rollout, max rel err {worst:.2e}, {}", secs(elapsed)),
    )
}

fn cell_oracles() -> Outcome {
    let mut r = common::rng(2024);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let (input, hidden) = (1 + case % 3, 1 + case % 5);
        let p = common::random_lstm(&mut r, input, hidden);
        let x = common::random_vector(&mut r, input, 2.0);
        let h = common::random_vector(&mut r, hidden, 1.0);
        let c = common::random_vector(&mut r, hidden, 1.0);
        let (h_t, c_t) = lstm_cell_step(&p, &x, &h, &c).unwrap();
        let (h_o, c_o) = common::lstm_scalar(&p, x.as_slice(), h.as_slice(), c.as_slice());
        for (a, b) in h_t.as_slice().iter().zip(&h_o).chain(c_t.as_slice().iter().zip(&c_o)) {
            worst = worst.max((a - b).abs());
        }
        let q = common::random_rnn(&mut r, input, hidden, 1 + case % 2);
        let (z, s) = rnn_cell_step(&q, &x, &c).unwrap();
        let (z_o, s_o) = common::rnn_scalar(&q, x.as_slice(), c.as_slice());
        for (a, b) in z.as_slice().iter().zip(&z_o).chain(s.as_slice().iter().zip(&s_o)) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(worst < 1e-12, format!("100 LSTM + 100 RNN cases, max abs diff {worst:.2e}"))
}

fn leave_one_out(traces: &[DeviceTrace]) -> Outcome {
    let cfg = TrainConfig::desk_scale();
    let mut pass = true;
    let mut parts = Vec::new();
    for i in 0..traces.len() {
        let start = Instant::now();
        let run = train_holdout(traces, i, &cfg, SEED).unwrap();
        let mse = evaluate_windows(&run.outcome.best, &run.holdout, 1).unwrap();
        let elapsed = start.elapsed();
        pass &= mse < 1e-3 && elapsed < Duration::from_secs(300);
        parts.push(format!("{}={mse:.2e} ({})", traces[i].device_id, secs(elapsed)));
    }
    outcome(pass, format!("held-out normalized MSE {}", parts.join(", ")))
}

fn baselines(traces: &[DeviceTrace]) -> Outcome {
    let table = compare_on_traces(traces, &CompareConfig::default()).unwrap();
    let wins = table.reference_wins();
    let means: Vec<String> = table
        .methods
        .iter()
        .zip(&table.aggregate)
        .map(|(m, e)| format!("{m}={e:.2}%"))
        .collect();
    outcome(wins >= 4, format!("deep_race best in {wins}/5, mean {}", means.join(" ")))
}

fn aggregation(traces: &[DeviceTrace]) -> Outcome {
    let start = Instant::now();
    let holdout = traces.len() - 1;
    let curve =
        aggregation_experiment(traces, holdout, &[1, 2, 3, 4], 20, &TrainConfig::desk_scale(), SEED).unwrap();
    let elapsed = start.elapsed();
    let means: Vec<String> = curve.points.iter().map(|p| format!("m{}={:.3e}", p.m, p.mean_mse)).collect();
    outcome(
        curve.monotone && elapsed < Duration::from_secs(1800),
        format!("20 trials, holdout {}, {}, {}", curve.holdout, means.join(" "), secs(elapsed)),
    )
}

fn detection_examples() -> Outcome {
    let device = |id: &str, at_cross: f64| DevicePrediction {
        device_id: id.into(),
        actual: vec![0.01, 0.03, 0.049, 0.05, 0.07],
        predicted: vec![0.02, at_cross, 0.2],
        offset: 2,
    };
    let exact = error_at_5pct(&[device("a", 0.05), device("b", 0.05)], DETECTION_THRESHOLD).unwrap();
    let single = error_at_5pct(&[device("a", 0.06)], DETECTION_THRESHOLD).unwrap();
    let mixed =
        error_at_5pct(&[device("a", 0.05), device("b", 0.04), device("c", 0.06)], DETECTION_THRESHOLD).unwrap();
    let pass = exact == 0.0 && (single - 20.0).abs() < 1e-12 && (mixed - 40.0 / 3.0).abs() < 1e-12;
    outcome(pass, format!("{exact}%, {single:.4}%, {mixed:.4}%"))
}

fn scenario(traces: &[DeviceTrace], delta_r_t: f64) -> SimReport {
    let mut spec = ScenarioSpec::new(format!("acceptance-{delta_r_t}"), "dev3");
    spec.delta_r_t = delta_r_t;
    run_scenario_with(&spec, traces, SEED).unwrap()
}

fn first_tick(report: &SimReport, pred: impl Fn(&drift_core::edgecloud::EventRecord) -> bool) -> Option<u64> {
    report.events.iter().find(|e| pred(e)).map(|e| e.tick)
}

fn edge_protocol(traces: &[DeviceTrace]) -> Outcome {
    let never = scenario(traces, f64::INFINITY);
    let eager = scenario(traces, 0.0);
    let again = scenario(traces, 0.0);
    let matured = first_tick(&eager, |e| e.kind == EventKind::Sample && !e.detail.contains(" matured=0 "));
    let requested = first_tick(&eager, |e| e.kind == EventKind::RetrainRequest);
    let pushes: Vec<u64> = eager
        .events
        .iter()
        .filter(|e| e.kind == EventKind::ModelPush)
        .map(|e| e.version)
        .collect();
    let increasing = pushes.windows(2).all(|w| w[1] > w[0]);
    let deterministic = eager.events_csv() == again.events_csv() && eager.summary() == again.summary();
    let pass = never.retrains == 0
        && never.retrain_requests == 0
        && matured.is_some()
        && requested == matured
        && eager.retrains >= 1
        && increasing
        && eager.final_version == 1 + eager.retrains as u64
        && deterministic;
    outcome(
        pass,
        format!(
            "inf: {} retrains; 0: first matured tick {matured:?}, first request {requested:?}, pushes {pushes:?}, deterministic={deterministic}",
            never.retrains
        ),
    )
}

fn random_snapshot(r: &mut ChaCha8Rng) -> ModelSnapshot {
    let config = NetConfig {
        k: r.random_range(1..=2),
        tau: r.random_range(1..=6),
        n: r.random_range(1..=4),
        hidden: r.random_range(1..=5),
        ell: r.random_range(1..=3),
        learn_initial_state: r.random(),
    };
    let count = config.param_count().unwrap();
    let lo: f64 = r.random_range(-1.0..1.0);
    ModelSnapshot {
        version: r.random(),
        config,
        normalizer: Normalizer::new(lo, lo + r.random_range(1e-3..2.0)).unwrap(),
        params: (0..count).map(|_| f64::from_bits(r.random())).collect(),
    }
}

fn serialization() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(SEED);
    let mut round_trips = 0;
    let mut corruptions = 0usize;
    let mut missed = 0usize;
    for _ in 0..1000 {
        let s = random_snapshot(&mut r);
        let bytes = s.encode();
        if ModelSnapshot::decode(&bytes, Some(&s.config)).is_ok_and(|back| back.bit_eq(&s)) {
            round_trips += 1;
        }
        let mut bad = bytes.clone();
        for i in 0..bad.len() {
            let flip = r.random_range(1..=255u8);
            bad[i] ^= flip;
            corruptions += 1;
            if ModelSnapshot::decode(&bad, None).is_ok() {
                missed += 1;
            }
            bad[i] ^= flip;
        }
    }
    outcome(
        round_trips == 1000 && missed == 0,
        format!("{round_trips}/1000 bit-exact, {missed}/{corruptions} single-byte corruptions undetected"),
    )
}

fn train_once(dir: &Path) -> std::io::Result<(Vec<u8>, Vec<u8>)> {
    let status = Command::new(env!("CARGO_BIN_EXE_drift"))
        .args(["--profile", "desk", "--seed", "42", "train", "--holdout", "dev2", "--out"])
        .arg(dir)
        .output()?;
    if !status.status.success() {
        return Err(std::io::Error::other(String::from_utf8_lossy(&status.stderr).into_owned()));
    }
    Ok((std::fs::read(dir.join("model.drce"))?, std::fs::read(dir.join("history.csv"))?))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let a = train_once(&tmp.path().join("a"));
    let b = train_once(&tmp.path().join("b"));
    match (a, b) {
        (Ok(a), Ok(b)) => outcome(
            a == b,
            format!("model.drce {} bytes, identical={}, history identical={}", a.0.len(), a.0 == b.0, a.1 == b.1),
        ),
        (Err(e), _) | (_, Err(e)) => outcome(false, format!("drift train failed: {e}")),
    }
}

fn main() {
    let traces = presets();
    type Check<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);
    let checks: Vec<Check> = vec![
        ("gradient correctness", Box::new(gradients)),
        ("cell-oracle equivalence", Box::new(cell_oracles)),
        ("leave-one-out held-out MSE", Box::new(|| leave_one_out(&traces))),
        ("baseline ordering", Box::new(|| baselines(&traces))),
        ("aggregation scaling", Box::new(|| aggregation(&traces))),
        ("detection-error examples", Box::new(detection_examples)),
        ("edge-cloud protocol", Box::new(|| edge_protocol(&traces))),
        ("serialization", Box::new(serialization)),
        ("train determinism", Box::new(determinism)),
    ];
    let mut passed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let o = check();
        passed += o.pass as usize;
        println!("{} {}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("acceptance: {passed}/{} criteria passed", checks.len());
}
