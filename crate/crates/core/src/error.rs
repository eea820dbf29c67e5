use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("device `{device}` has {len} samples but at least {need} are required")]
    InsufficientData {
        device: String,
        len: usize,
        need: usize,
    },

    #[error("training diverged at iteration {iteration}: non-finite {what}")]
    Divergence { iteration: usize, what: &'static str },

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: String,
        line: u64,
        msg: String,
    },

    #[error("{0}: trace is empty")]
    EmptyTrace(String),

    #[error("{path}: line {line}: index {index} does not increase")]
    NonMonotonic {
        path: String,
        line: u64,
        index: u64,
    },

    #[error("normalizer range is degenerate (r_min = r_max = {0})")]
    DegenerateRange(f64),

    #[error("metric undefined: device `{device}` never reaches {threshold} ohm")]
    MetricUndefined { device: String, threshold: f64 },

    #[error("metric undefined: no prediction for device `{device}` at index {index}")]
    MissingPrediction { device: String, index: usize },

    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },

    #[error("particle filter degenerated at step {step} (effective sample size {ess:.3})")]
    Degeneracy { step: usize, ess: f64 },

    #[error("bad magic: expected DRCE")]
    BadMagic,

    #[error("unsupported model format version {0}")]
    FormatVersion(u16),

    #[error("model checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("model is truncated or malformed: {0}")]
    Malformed(String),

    #[error("model config incompatible: {0}")]
    ConfigMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
