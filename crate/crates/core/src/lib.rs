//! Degradation forecasting for power-MOSFET on-resistance drift.
//!
//! The crate provides a from-scratch stacked LSTM forecaster with its
//! training loop, evaluation metrics, Kalman and particle-filter baselines,
//! a synthetic degradation generator, and a deterministic edge/cloud
//! retraining simulator.

// Negated float comparisons are how NaN gets rejected alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod config;
pub mod data;
pub mod edgecloud;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod network;
pub mod text;
pub mod training;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
pub use network::{init_params, NetConfig, StackedLstm};
pub use training::{train, Sequence, TrainConfig, TrainOutcome};
pub use baselines::ComparisonTable;
pub use config::RunConfig;
pub use data::{DeviceTrace, Normalizer, SynthParams};
pub use edgecloud::{ModelSnapshot, ScenarioSpec, SimReport};
pub use metrics::ErrorReport;
