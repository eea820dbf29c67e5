//! Fixtures shared by the kernel benchmarks.

use drift_core::data::Normalizer;
use drift_core::edgecloud::ModelSnapshot;
use drift_core::linalg::Matrix;
use drift_core::network::{init_params, NetConfig, StackedLstm};
use drift_core::training::{generate_data, Sequence, TrainConfig, TrainingBatch};

/// Desk-scale network shape.
pub fn desk_config() -> NetConfig {
    TrainConfig::desk_scale().net
}

pub fn network(cfg: NetConfig) -> StackedLstm {
    init_params(cfg, 1).expect("valid config")
}

/// Dense matrix with a deterministic non-trivial fill.
pub fn matrix(rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |r, c| ((r * 31 + c * 17) % 13) as f64 / 13.0 - 0.5)
}

/// One batch of `m` windows cut from smooth synthetic curves.
pub fn batch(cfg: &NetConfig, m: usize) -> TrainingBatch {
    let len = cfg.tau + cfg.n + 40;
    let seqs: Vec<Sequence> = (0..m)
        .map(|d| {
            let values: Vec<f64> = (0..len)
                .map(|t| (0.002 * (d + 1) as f64 * t as f64).exp() - 1.0)
                .map(|v| v.tanh() * 2.0 - 1.0)
                .collect();
            Sequence::from_scalars(format!("d{d}"), &values)
        })
        .collect();
    let refs: Vec<&Sequence> = seqs.iter().collect();
    generate_data(&refs, cfg, 7).expect("long enough")
}

pub fn snapshot(cfg: NetConfig) -> ModelSnapshot {
    ModelSnapshot::from_network(1, &network(cfg), Normalizer::new(0.0, 0.1).expect("valid range"))
}
