use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

/// Small, fast training settings shared by most tests.
const QUICK: &[&str] = &["--profile", "desk", "--set", "it_max=5", "--set", "hidden=4"];

fn drift(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drift"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn drift")
}

fn quick(dir: &Path, args: &[&str]) -> Output {
    let all: Vec<&str> = QUICK.iter().chain(args).copied().collect();
    drift(dir, &all)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn trained(tmp: &TempDir) {
    let o = quick(tmp.path(), &["train", "--holdout", "dev4", "--out", "m"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn synth_writes_every_preset() {
    let tmp = TempDir::new().unwrap();
    let o = drift(tmp.path(), &["synth", "--out", "data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for id in ["dev1", "dev2", "dev3", "dev4", "dev5"] {
        let text = fs::read_to_string(tmp.path().join(format!("data/{id}.csv"))).unwrap();
        assert!(text.starts_with("index,delta_r_ohms\n"));
    }
}

#[test]
fn synth_rejects_short_traces_before_writing() {
    let tmp = TempDir::new().unwrap();
    let o = drift(tmp.path(), &["--set", "synth.length=10", "synth", "--out", "data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("tau+n"), "{}", stderr(&o));
    assert!(!tmp.path().join("data").exists());
}

#[test]
fn usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(drift(tmp.path(), &["train"]).status.code(), Some(2));
    assert_eq!(drift(tmp.path(), &["--set", "nonsense=1", "synth"]).status.code(), Some(2));
    assert_eq!(drift(tmp.path(), &["--set", "novalue", "synth"]).status.code(), Some(2));
    assert_eq!(drift(tmp.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(quick(tmp.path(), &["train", "--holdout", "dev9"]).status.code(), Some(2));
}

#[test]
fn verbose_reports_precedence() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("run.cfg"), "seed=7\nhidden=8\nprofile=desk\n").unwrap();
    let o = drift(
        tmp.path(),
        &["--config", "run.cfg", "--seed", "9", "--verbose", "--set", "synth.length=10", "synth"],
    );
    let err = stderr(&o);
    assert!(err.contains("seed=9  # flag"), "{err}");
    assert!(err.contains("hidden=8  # file run.cfg"), "{err}");
    assert!(err.contains("ell=2  # profile desk"), "{err}");
    assert!(err.contains("retrain_budget=3  # default"), "{err}");
}

#[test]
fn train_predict_and_corruption() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path();
    let o = quick(p, &["train", "--holdout", "dev4", "--out", "m"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("best_test_log_mse="), "{out}");
    assert!(out.contains("log_base=e"));
    let history = fs::read_to_string(p.join("m/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 5);

    assert!(drift(p, &["synth", "--out", "data"]).status.success());
    let o = drift(p, &["predict", "--model", "m/model.drce", "--trace", "data/dev4.csv", "--horizon", "0", "--out", "p0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(p.join("p0/dev4_predictions.csv")).unwrap(),
        "index,predicted_delta_r_ohms\n"
    );
    let o = drift(p, &["predict", "--model", "m/model.drce", "--trace", "data/dev4.csv", "--horizon", "3", "--out", "p3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = fs::read_to_string(p.join("p3/dev4_predictions.csv")).unwrap();
    assert_eq!(rows.lines().count(), 4);
    let first: Vec<&str> = rows.lines().nth(1).unwrap().split(',').collect();
    assert!(first[1].parse::<f64>().unwrap().is_finite());

    let mut bytes = fs::read(p.join("m/model.drce")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(p.join("bad.drce"), &bytes).unwrap();
    let o = drift(p, &["predict", "--model", "bad.drce", "--trace", "data/dev4.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));
}

#[test]
fn untrained_model_warns() {
    let tmp = TempDir::new().unwrap();
    let o = drift(tmp.path(), &["--profile", "desk", "--set", "it_max=0", "train", "--holdout", "dev1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"));
    assert!(tmp.path().join("out/model.drce").exists());
}

#[test]
fn evaluate_writes_report_and_residuals() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path();
    trained(&tmp);
    assert!(drift(p, &["synth", "--out", "data"]).status.success());
    let o = drift(p, &["evaluate", "--model", "m/model.drce", "--trace", "data/dev4.csv", "--out", "e"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(p.join("e/dev4_report.txt")).unwrap();
    for key in ["mse_ohm2=", "log_mse=", "error_at_5pct=", "log_base=e"] {
        assert!(report.contains(key), "{key} missing from {report}");
    }
    let residuals = fs::read_to_string(p.join("e/dev4_residuals.csv")).unwrap();
    assert!(residuals.lines().count() > 1);
}

#[test]
fn data_directory_replaces_presets() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path();
    assert!(drift(p, &["synth", "--out", "data"]).status.success());
    fs::remove_file(p.join("data/dev5.csv")).unwrap();
    let o = quick(p, &["--set", "data=data", "train", "--holdout", "dev5"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = quick(p, &["--set", "data=data", "train", "--holdout", "dev1"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn compare_reports_three_methods() {
    let tmp = TempDir::new().unwrap();
    let o = quick(tmp.path(), &["--set", "particles=100", "compare"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("out/comparison.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    for col in ["deep_race_error_pct", "kalman_error_pct", "particle_error_pct", "kalman_ratio"] {
        assert!(header.contains(col), "{header}");
    }
    assert!(tmp.path().join("out/comparison.txt").exists());
}

#[test]
fn simulate_without_retraining() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("quiet.scn"),
        "name=quiet\nholdout=dev2\ndelta_r_t=inf\nsamples=80\ntrain.hidden=4\ntrain.it_max=5\n",
    )
    .unwrap();
    let o = drift(tmp.path(), &["simulate", "--scenario", "quiet.scn"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(tmp.path().join("out/summary.txt")).unwrap();
    assert!(summary.contains("retrains=0\n"), "{summary}");
    assert!(summary.contains("samples_streamed=80\n"), "{summary}");
    let events = fs::read_to_string(tmp.path().join("out/events.csv")).unwrap();
    assert!(events.starts_with("tick,seq,kind,version,detail\n"));
}

#[test]
fn simulate_needs_a_holdout() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(quick(tmp.path(), &["simulate"]).status.code(), Some(2));
}

#[test]
fn aggregate_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let args = ["--set", "trials=2", "--set", "m_values=1,2", "aggregate"];
    let a = quick(tmp.path(), &[&args[..], &["--out", "a"]].concat());
    let b = quick(tmp.path(), &[&args[..], &["--out", "b"]].concat());
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    let csv = fs::read_to_string(tmp.path().join("a/aggregation.csv")).unwrap();
    assert!(csv.starts_with("m,mean_mse,trials\n"));
    assert_eq!(csv.lines().count(), 3);
    assert!(stdout(&a).contains("monotone="));
}
