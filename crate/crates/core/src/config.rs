//! Run configuration: built-in defaults, a profile, a `key=value` file and
//! command-line overrides, applied in that order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::text::{fmt_sig, parse_kv, parse_value};
use crate::training::TrainConfig;

/// Training keys shared by run configs and scenario files.
pub const TRAIN_KEYS: &[&str] = &[
    "k",
    "tau",
    "n",
    "hidden",
    "ell",
    "learn_initial_state",
    "e_th",
    "it_max",
    "m",
    "lr",
    "beta1",
    "beta2",
    "epsilon",
    "clip_norm",
    "test_windows",
];

/// Sets one training key; returns `false` when `key` is not a training key.
pub fn apply_train_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "k" => cfg.net.k = parse_value(key, value)?,
        "tau" => cfg.net.tau = parse_value(key, value)?,
        "n" => cfg.net.n = parse_value(key, value)?,
        "hidden" => cfg.net.hidden = parse_value(key, value)?,
        "ell" => cfg.net.ell = parse_value(key, value)?,
        "learn_initial_state" => cfg.net.learn_initial_state = parse_value(key, value)?,
        "e_th" => cfg.e_th = parse_value(key, value)?,
        "it_max" => cfg.it_max = parse_value(key, value)?,
        "m" => cfg.m = parse_value(key, value)?,
        "lr" => cfg.adam.lr = parse_value(key, value)?,
        "beta1" => cfg.adam.beta1 = parse_value(key, value)?,
        "beta2" => cfg.adam.beta2 = parse_value(key, value)?,
        "epsilon" => cfg.adam.epsilon = parse_value(key, value)?,
        "clip_norm" => {
            cfg.clip_norm = match value {
                "none" | "off" => None,
                v => Some(parse_value(key, v)?),
            }
        }
        "test_windows" => cfg.test_windows = parse_value(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Current value of a training key, formatted for display.
pub fn train_key_value(cfg: &TrainConfig, key: &str) -> Option<String> {
    Some(match key {
        "k" => cfg.net.k.to_string(),
        "tau" => cfg.net.tau.to_string(),
        "n" => cfg.net.n.to_string(),
        "hidden" => cfg.net.hidden.to_string(),
        "ell" => cfg.net.ell.to_string(),
        "learn_initial_state" => cfg.net.learn_initial_state.to_string(),
        "e_th" => fmt_sig(cfg.e_th, 6),
        "it_max" => cfg.it_max.to_string(),
        "m" => cfg.m.to_string(),
        "lr" => fmt_sig(cfg.adam.lr, 6),
        "beta1" => fmt_sig(cfg.adam.beta1, 6),
        "beta2" => fmt_sig(cfg.adam.beta2, 6),
        "epsilon" => fmt_sig(cfg.adam.epsilon, 6),
        "clip_norm" => cfg.clip_norm.map_or_else(|| "none".into(), |c| fmt_sig(c, 6)),
        "test_windows" => cfg.test_windows.to_string(),
        _ => return None,
    })
}

/// Named starting points for the training keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Full-size network and optimizer defaults.
    Full,
    /// [`TrainConfig::desk_scale`].
    Desk,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Profile::Full),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected full or desk)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Full => "full",
            Profile::Desk => "desk",
        }
    }

    pub fn train_config(self) -> TrainConfig {
        match self {
            Profile::Full => TrainConfig::default(),
            Profile::Desk => TrainConfig::desk_scale(),
        }
    }
}

/// Where a resolved value came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    Profile(&'static str),
    File(String),
    Flag,
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Source::Default => write!(f, "default"),
            Source::Profile(p) => write!(f, "profile {p}"),
            Source::File(path) => write!(f, "file {path}"),
            Source::Flag => write!(f, "flag"),
        }
    }
}

/// Every knob of every subcommand, fully resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub train: TrainConfig,
    pub seed: u64,
    pub out: PathBuf,
    /// Directory of device CSVs; `None` uses the bundled presets.
    pub data: Option<PathBuf>,
    pub holdout: Option<String>,
    /// Prediction horizon; `None` means `n`.
    pub horizon: Option<usize>,
    pub synth_length: Option<usize>,
    pub synth_noise_sigma: Option<f64>,
    /// Comparison prefix lead before the crossing; `None` means `n / 2`.
    pub lead: Option<usize>,
    pub particles: usize,
    pub trials: usize,
    pub m_values: Vec<usize>,
    /// Aggregation test device; `None` picks the last device.
    pub aggregate_holdout: Option<String>,
    pub delta_r_t: f64,
    pub retrain_budget: usize,
    pub retrain_latency: u64,
    pub upload_every: usize,
    pub retrain_lr_scale: f64,
    sources: BTreeMap<String, Source>,
}

const RUN_KEYS: &[&str] = &[
    "profile",
    "seed",
    "out",
    "data",
    "holdout",
    "horizon",
    "synth.length",
    "synth.noise_sigma",
    "lead",
    "particles",
    "trials",
    "m_values",
    "aggregate_holdout",
    "delta_r_t",
    "retrain_budget",
    "retrain_latency",
    "upload_every",
    "retrain_lr_scale",
];

fn opt_string<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".into(), T::to_string)
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            profile: Profile::Full,
            train: TrainConfig::default(),
            seed: 42,
            out: PathBuf::from("out"),
            data: None,
            holdout: None,
            horizon: None,
            synth_length: None,
            synth_noise_sigma: None,
            lead: None,
            particles: 1000,
            trials: 20,
            m_values: vec![1, 2, 3, 4],
            aggregate_holdout: None,
            delta_r_t: 0.005,
            retrain_budget: 3,
            retrain_latency: 10,
            upload_every: 25,
            retrain_lr_scale: 0.1,
            sources: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    /// Resolves defaults, then the profile, then `file` entries, then `flags`.
    /// The profile itself is taken from the flags, else the file, else `full`.
    pub fn resolve(file: Option<(&Path, &str)>, flags: &[(String, String)]) -> Result<Self> {
        let file_map = match file {
            Some((path, text)) => parse_kv(text, &path.display().to_string())?,
            None => BTreeMap::new(),
        };
        let file_name = file.map(|(p, _)| p.display().to_string()).unwrap_or_default();
        let mut cfg = RunConfig::default();
        let profile = match flags.iter().rev().find(|(k, _)| k == "profile") {
            Some((_, v)) => (Profile::parse(v)?, Source::Flag),
            None => match file_map.get("profile") {
                Some(v) => (Profile::parse(v)?, Source::File(file_name.clone())),
                None => (Profile::Full, Source::Default),
            },
        };
        cfg.profile = profile.0;
        cfg.train = profile.0.train_config();
        cfg.sources.insert("profile".into(), profile.1);
        if profile.0 != Profile::Full {
            for key in TRAIN_KEYS {
                cfg.sources.insert((*key).into(), Source::Profile(profile.0.name()));
            }
        }
        for (k, v) in &file_map {
            if k != "profile" {
                cfg.apply(k, v, Source::File(file_name.clone()))?;
            }
        }
        for (k, v) in flags {
            if k != "profile" {
                cfg.apply(k, v, Source::Flag)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, key: &str, value: &str, source: Source) -> Result<()> {
        if !apply_train_key(&mut self.train, key, value)? {
            match key {
                "seed" => self.seed = parse_value(key, value)?,
                "out" => self.out = PathBuf::from(value),
                "data" => self.data = Some(PathBuf::from(value)),
                "holdout" => self.holdout = Some(value.to_string()),
                "horizon" => self.horizon = Some(parse_value(key, value)?),
                "synth.length" => self.synth_length = Some(parse_value(key, value)?),
                "synth.noise_sigma" => self.synth_noise_sigma = Some(parse_value(key, value)?),
                "lead" => self.lead = Some(parse_value(key, value)?),
                "particles" => self.particles = parse_value(key, value)?,
                "trials" => self.trials = parse_value(key, value)?,
                "m_values" => {
                    self.m_values = value
                        .split(',')
                        .map(|s| parse_value(key, s.trim()))
                        .collect::<Result<_>>()?
                }
                "aggregate_holdout" => self.aggregate_holdout = Some(value.to_string()),
                "delta_r_t" => self.delta_r_t = parse_value(key, value)?,
                "retrain_budget" => self.retrain_budget = parse_value(key, value)?,
                "retrain_latency" => self.retrain_latency = parse_value(key, value)?,
                "upload_every" => self.upload_every = parse_value(key, value)?,
                "retrain_lr_scale" => self.retrain_lr_scale = parse_value(key, value)?,
                "profile" => {
                    return Err(Error::Config("profile must be resolved before other keys".into()));
                }
                other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
            }
        }
        self.sources.insert(key.to_string(), source);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.m_values.is_empty() || self.m_values.contains(&0) {
            return Err(Error::Config("m_values must be a non-empty list of positive integers".into()));
        }
        if self.upload_every == 0 {
            return Err(Error::Config("upload_every must be positive".into()));
        }
        if self.delta_r_t.is_nan() || self.delta_r_t < 0.0 {
            return Err(Error::Config("delta_r_t must be non-negative".into()));
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.horizon.unwrap_or(self.train.net.n)
    }

    pub fn lead(&self) -> usize {
        self.lead.unwrap_or(self.train.net.n / 2)
    }

    pub fn source(&self, key: &str) -> Source {
        self.sources.get(key).cloned().unwrap_or(Source::Default)
    }

    fn value(&self, key: &str) -> String {
        if let Some(v) = train_key_value(&self.train, key) {
            return v;
        }
        match key {
            "profile" => self.profile.name().into(),
            "seed" => self.seed.to_string(),
            "out" => self.out.display().to_string(),
            "data" => self.data.as_ref().map_or_else(|| "presets".into(), |p| p.display().to_string()),
            "holdout" => opt_string(&self.holdout),
            "horizon" => self.horizon().to_string(),
            "synth.length" => opt_string(&self.synth_length),
            "synth.noise_sigma" => self.synth_noise_sigma.map_or_else(|| "auto".into(), |v| fmt_sig(v, 6)),
            "lead" => self.lead().to_string(),
            "particles" => self.particles.to_string(),
            "trials" => self.trials.to_string(),
            "m_values" => self.m_values.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            "aggregate_holdout" => opt_string(&self.aggregate_holdout),
            "delta_r_t" => fmt_sig(self.delta_r_t, 6),
            "retrain_budget" => self.retrain_budget.to_string(),
            "retrain_latency" => self.retrain_latency.to_string(),
            "upload_every" => self.upload_every.to_string(),
            "retrain_lr_scale" => fmt_sig(self.retrain_lr_scale, 6),
            _ => String::new(),
        }
    }

    /// Every key with its value and where it came from.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for key in RUN_KEYS.iter().chain(TRAIN_KEYS) {
            let _ = writeln!(out, "{key}={}  # {}", self.value(key), self.source(key));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_match_table_values() {
        let cfg = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!((cfg.train.e_th, cfg.train.it_max, cfg.train.m), (5e-5, 1000, 4));
        assert_eq!(cfg.horizon(), 104);
        assert_eq!(cfg.source("hidden"), Source::Default);
    }

    #[test]
    fn flags_override_file_override_profile() {
        let text = "profile = desk\nhidden = 12\nit_max = 50\nseed = 3\n";
        let path = Path::new("run.cfg");
        let cfg = RunConfig::resolve(Some((path, text)), &flags(&[("it_max", "7")])).unwrap();
        assert_eq!(cfg.profile, Profile::Desk);
        assert_eq!(cfg.train.net.hidden, 12);
        assert_eq!(cfg.train.net.ell, 2);
        assert_eq!(cfg.train.it_max, 7);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.source("it_max"), Source::Flag);
        assert_eq!(cfg.source("hidden"), Source::File("run.cfg".into()));
        assert_eq!(cfg.source("ell"), Source::Profile("desk"));
        let text = cfg.describe();
        assert!(text.contains("it_max=7  # flag"));
        assert!(text.contains("profile=desk  # file run.cfg"));
    }

    #[test]
    fn flag_profile_wins_over_file_profile() {
        let cfg = RunConfig::resolve(Some((Path::new("c"), "profile=desk\n")), &flags(&[("profile", "full")])).unwrap();
        assert_eq!(cfg.train.net.hidden, 64);
    }

    #[test]
    fn bad_keys_and_values() {
        assert!(RunConfig::resolve(None, &flags(&[("bogus", "1")])).is_err());
        assert!(RunConfig::resolve(None, &flags(&[("hidden", "x")])).is_err());
        assert!(RunConfig::resolve(None, &flags(&[("hidden", "0")])).is_err());
        assert!(RunConfig::resolve(None, &flags(&[("profile", "huge")])).is_err());
        assert!(RunConfig::resolve(None, &flags(&[("m_values", "1,0")])).is_err());
    }

    #[test]
    fn list_and_optional_values() {
        let cfg = RunConfig::resolve(
            None,
            &flags(&[("m_values", "1, 3"), ("clip_norm", "none"), ("delta_r_t", "inf")]),
        )
        .unwrap();
        assert_eq!(cfg.m_values, vec![1, 3]);
        assert_eq!(cfg.train.clip_norm, None);
        assert!(cfg.delta_r_t.is_infinite());
    }
}
