use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use drift_core::baselines::{compare_on_traces, CompareConfig};
use drift_core::config::RunConfig;
use drift_core::data::{default_presets, load_csv, save_csv, synth_degradation, DeviceTrace, Preset};
use drift_core::edgecloud::{aggregation_experiment, run_scenario_with, ModelSnapshot, ScenarioSpec};
use drift_core::metrics::{log_mse, residuals_csv, DevicePrediction, ErrorReport, DETECTION_THRESHOLD};
use drift_core::text::fmt_sig;
use drift_core::training::{evaluate_windows, forecast_ohms, history_csv, train_holdout};

use crate::{Command, Common};

/// Bad invocation; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(common: &Common, command: &Command) -> Result<()> {
    let cfg = resolve(common)?;
    if common.verbose {
        eprint!("{}", cfg.describe());
    }
    match command {
        Command::Synth => synth(&cfg),
        Command::Train { holdout } => cmd_train(&cfg, holdout.as_deref()),
        Command::Predict { model, trace, horizon } => predict(&cfg, model, trace, *horizon),
        Command::Evaluate { model, trace } => evaluate(&cfg, model, trace),
        Command::Compare => compare(&cfg),
        Command::Simulate { scenario, holdout } => simulate(&cfg, scenario.as_deref(), holdout.as_deref()),
        Command::Aggregate => aggregate(&cfg),
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut flags = Vec::new();
    if let Some(p) = &common.profile {
        flags.push(("profile".to_string(), p.clone()));
    }
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        flags.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = common.seed {
        flags.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &common.out {
        flags.push(("out".into(), out.display().to_string()));
    }
    let text;
    let file = match &common.config {
        Some(path) => {
            text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Some((path.as_path(), text.as_str()))
        }
        None => None,
    };
    RunConfig::resolve(file, &flags).map_err(|e| usage(e.to_string()))
}

fn presets(cfg: &RunConfig) -> Vec<Preset> {
    default_presets()
        .into_iter()
        .map(|mut p| {
            if let Some(len) = cfg.synth_length {
                p.params.length = len;
            }
            if let Some(sigma) = cfg.synth_noise_sigma {
                p.params.noise_sigma = sigma;
            }
            p
        })
        .collect()
}

/// Device CSVs from `data` (sorted by file name), else the presets.
fn load_devices(cfg: &RunConfig) -> Result<Vec<DeviceTrace>> {
    let Some(dir) = &cfg.data else {
        return presets(cfg)
            .iter()
            .map(|p| Ok(synth_degradation(&p.id, &p.params)?))
            .collect();
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .csv traces in {}", dir.display());
    }
    paths.iter().map(|p| Ok(load_csv(p)?)).collect()
}

fn device_index(traces: &[DeviceTrace], id: &str) -> Result<usize> {
    traces.iter().position(|t| t.device_id == id).ok_or_else(|| {
        let known: Vec<&str> = traces.iter().map(|t| t.device_id.as_str()).collect();
        usage(format!("unknown device `{id}` (have {})", known.join(", ")))
    })
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    Ok(&cfg.out)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let presets = presets(cfg);
    let window = cfg.train.net.window();
    for p in &presets {
        p.params.validate()?;
        if p.params.length < window {
            bail!(
                "preset {} has length {} but training needs at least tau+n = {window}",
                p.id,
                p.params.length
            );
        }
    }
    let traces: Vec<DeviceTrace> = presets
        .iter()
        .map(|p| synth_degradation(&p.id, &p.params))
        .collect::<Result<_, _>>()?;
    let dir = out_dir(cfg)?;
    for t in &traces {
        let path = dir.join(format!("{}.csv", t.device_id));
        save_csv(t, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig, holdout: Option<&str>) -> Result<()> {
    let holdout = holdout
        .or(cfg.holdout.as_deref())
        .ok_or_else(|| usage("train needs --holdout DEVICE"))?;
    let traces = load_devices(cfg)?;
    if traces.len() < 2 {
        bail!("training needs at least two devices, found {}", traces.len());
    }
    let hold = device_index(&traces, holdout)?;
    if cfg.train.it_max == 0 {
        eprintln!("warning: it_max=0, writing the untrained initial model");
    }
    let run = train_holdout(&traces, hold, &cfg.train, cfg.seed)?;
    let snapshot = ModelSnapshot::from_network(1, &run.outcome.best, run.normalizer);
    let dir = out_dir(cfg)?;
    write(&dir.join("model.drce"), snapshot.encode())?;
    write(&dir.join("history.csv"), history_csv(&run.outcome.history))?;
    let heldout = evaluate_windows(&run.outcome.best, &run.holdout, 1)?;
    match run.outcome.history.last() {
        Some(last) => {
            println!("iterations={}", last.iteration);
            println!("final_train_mse={}", fmt_sig(last.train_mse, 6));
            println!("final_test_mse={}", fmt_sig(last.test_mse, 6));
        }
        None => println!("iterations=0"),
    }
    println!("best_test_mse={}", fmt_sig(run.outcome.best_test_mse, 6));
    println!("best_test_log_mse={}", fmt_sig(log_mse(run.outcome.best_test_mse), 6));
    println!("heldout_mse={}", fmt_sig(heldout, 6));
    println!("heldout_log_mse={}", fmt_sig(log_mse(heldout), 6));
    println!("log_base=e");
    Ok(())
}

fn load_model(path: &Path) -> Result<ModelSnapshot> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    ModelSnapshot::decode(&bytes, None).with_context(|| format!("decoding {}", path.display()))
}

fn predict(cfg: &RunConfig, model: &Path, trace: &Path, horizon: Option<usize>) -> Result<()> {
    let snapshot = load_model(model)?;
    let net = snapshot.network()?;
    let trace = load_csv(trace)?;
    let horizon = horizon.unwrap_or(snapshot.config.n);
    let preds = forecast_ohms(&net, &snapshot.normalizer, &trace.values(), horizon)?;
    let next = trace.samples().last().map_or(0, |s| s.index + 1);
    let mut csv = String::from("index,predicted_delta_r_ohms\n");
    for (i, p) in preds.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", next + i as u64, fmt_sig(*p, 12)));
    }
    let path = out_dir(cfg)?.join(format!("{}_predictions.csv", trace.device_id));
    write(&path, csv)?;
    println!("{}", path.display());
    Ok(())
}

fn evaluate(cfg: &RunConfig, model: &Path, trace: &Path) -> Result<()> {
    let snapshot = load_model(model)?;
    let net = snapshot.network()?;
    let nz = snapshot.normalizer;
    let trace = load_csv(trace)?;
    let values = trace.values();
    let n = snapshot.config.n;
    // Forecast from a prefix ending `lead` samples before the crossing when
    // there is one, otherwise over the last `n` samples.
    let cut = match trace.first_crossing(DETECTION_THRESHOLD) {
        Some(t5) => t5.saturating_sub(cfg.lead()),
        None => values.len().saturating_sub(n),
    };
    if cut < snapshot.config.tau {
        bail!(
            "trace {} is too short to evaluate: prefix {cut} < tau {}",
            trace.device_id,
            snapshot.config.tau
        );
    }
    let horizon = n.min(values.len() - cut);
    let preds = forecast_ohms(&net, &nz, &values[..cut], horizon)?;
    let actual = &values[cut..cut + horizon];
    let detection = DevicePrediction {
        device_id: trace.device_id.clone(),
        actual: values.clone(),
        predicted: preds.clone(),
        offset: cut,
    };
    let det = detection.detection_error_pct(DETECTION_THRESHOLD).ok().map(|_| &detection);
    let report = ErrorReport::new(actual, &preds, Some(&nz), det)?;
    let mut summary = format!("device={}\nprefix={cut}\nhorizon={horizon}\n", trace.device_id);
    if values.len() >= snapshot.config.window() {
        let seq = nz.sequence(&trace);
        summary.push_str(&format!("window_mse_normalized={}\n", fmt_sig(evaluate_windows(&net, &seq, 1)?, 6)));
    }
    summary.push_str(&report.to_kv(""));
    let dir = out_dir(cfg)?;
    write(&dir.join(format!("{}_report.txt", trace.device_id)), &summary)?;
    write(
        &dir.join(format!("{}_residuals.csv", trace.device_id)),
        residuals_csv(cut, actual, &preds)?,
    )?;
    print!("{summary}");
    Ok(())
}

fn compare(cfg: &RunConfig) -> Result<()> {
    let traces = load_devices(cfg)?;
    let cc = CompareConfig {
        train: cfg.train,
        lead: cfg.lead(),
        particles: cfg.particles,
        seed: cfg.seed,
    };
    let table = compare_on_traces(&traces, &cc)?;
    let dir = out_dir(cfg)?;
    write(&dir.join("comparison.csv"), table.to_csv())?;
    write(&dir.join("comparison.txt"), table.to_text())?;
    print!("{}", table.to_text());
    Ok(())
}

fn simulate(cfg: &RunConfig, scenario: Option<&Path>, holdout: Option<&str>) -> Result<()> {
    let (spec, traces) = match scenario {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut spec = ScenarioSpec::parse(&text, &path.display().to_string())?;
            if let Some(h) = holdout {
                spec.holdout = h.to_string();
            }
            let base = path.parent().unwrap_or(Path::new("."));
            let traces = spec.load_devices(base)?;
            (spec, traces)
        }
        None => {
            let traces = load_devices(cfg)?;
            let holdout = holdout
                .or(cfg.holdout.as_deref())
                .ok_or_else(|| usage("simulate needs --scenario FILE or --holdout DEVICE"))?;
            let mut spec = ScenarioSpec::new(format!("holdout-{holdout}"), holdout);
            spec.delta_r_t = cfg.delta_r_t;
            spec.horizon = cfg.horizon;
            spec.retrain_budget = cfg.retrain_budget;
            spec.retrain_latency = cfg.retrain_latency;
            spec.upload_every = cfg.upload_every;
            spec.retrain_lr_scale = cfg.retrain_lr_scale;
            spec.train = cfg.train;
            (spec, traces)
        }
    };
    device_index(&traces, &spec.holdout)?;
    let report = run_scenario_with(&spec, &traces, cfg.seed)?;
    let dir = out_dir(cfg)?;
    write(&dir.join("events.csv"), report.events_csv())?;
    write(&dir.join("summary.txt"), report.summary())?;
    print!("{}", report.summary());
    Ok(())
}

fn aggregate(cfg: &RunConfig) -> Result<()> {
    let traces = load_devices(cfg)?;
    let holdout = match &cfg.aggregate_holdout {
        Some(id) => device_index(&traces, id)?,
        None => traces.len().checked_sub(1).context("no devices")?,
    };
    let curve = aggregation_experiment(&traces, holdout, &cfg.m_values, cfg.trials, &cfg.train, cfg.seed)?;
    let dir = out_dir(cfg)?;
    write(&dir.join("aggregation.csv"), curve.to_csv())?;
    let mut summary = format!("holdout={}\ntrials={}\n", curve.holdout, cfg.trials);
    for p in &curve.points {
        summary.push_str(&format!("m{}.mean_mse={}\n", p.m, fmt_sig(p.mean_mse, 6)));
    }
    summary.push_str(&format!("monotone={}\n", curve.monotone));
    write(&dir.join("aggregation.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}
