//! Batch construction, loss, backpropagation through time, Adam, and the
//! checkpointing training loop.

use std::fmt::Write as _;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{DeviceTrace, Normalizer};
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::network::{init_params, DenseParams, ForwardTape, LstmCellParams, NetConfig, StackedLstm};
use crate::text::fmt_sig;

/// Read access to a sequence of `k`-wide samples.
pub trait SampleSource {
    fn id(&self) -> &str;
    fn len(&self) -> usize;
    fn sample(&self, index: usize) -> &Vector;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A normalized, named sequence of network-ready samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub steps: Vec<Vector>,
}

impl Sequence {
    /// Scalar series to a `k = 1` sequence.
    pub fn from_scalars(id: impl Into<String>, values: &[f64]) -> Self {
        Sequence {
            id: id.into(),
            steps: values.iter().map(|&v| Vector::from(vec![v])).collect(),
        }
    }
}

impl SampleSource for Sequence {
    fn id(&self) -> &str {
        &self.id
    }

    fn len(&self) -> usize {
        self.steps.len()
    }

    fn sample(&self, index: usize) -> &Vector {
        &self.steps[index]
    }
}

/// `m` windows of length `tau + n`, split into teacher-forced inputs and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    /// `m × (tau + n - 1)` input vectors.
    pub x: Vec<Vec<Vector>>,
    /// `m × n` target vectors.
    pub y: Vec<Vec<Vector>>,
    pub device_ids: Vec<String>,
    pub window_starts: Vec<usize>,
}

impl TrainingBatch {
    pub fn rows(&self) -> usize {
        self.x.len()
    }
}

/// One uniformly placed window per source.
pub fn generate_data_with<S: SampleSource + ?Sized, R: Rng + ?Sized>(
    sources: &[&S],
    cfg: &NetConfig,
    rng: &mut R,
) -> Result<TrainingBatch> {
    let window = cfg.window();
    let mut batch = TrainingBatch {
        x: Vec::with_capacity(sources.len()),
        y: Vec::with_capacity(sources.len()),
        device_ids: Vec::with_capacity(sources.len()),
        window_starts: Vec::with_capacity(sources.len()),
    };
    for src in sources {
        if src.len() < window {
            return Err(Error::InsufficientData {
                device: src.id().to_string(),
                len: src.len(),
                need: window,
            });
        }
        let start = rng.random_range(0..=src.len() - window);
        let mut x = Vec::with_capacity(window - 1);
        for i in start..start + window - 1 {
            let s = src.sample(i);
            if s.len() != cfg.k {
                return Err(Error::Shape {
                    op: "generate_data sample width",
                    left: (s.len(), 1),
                    right: (cfg.k, 1),
                });
            }
            x.push(s.clone());
        }
        let y = (start + cfg.tau..start + window).map(|i| src.sample(i).clone()).collect();
        batch.x.push(x);
        batch.y.push(y);
        batch.device_ids.push(src.id().to_string());
        batch.window_starts.push(start);
    }
    Ok(batch)
}

pub fn generate_data<S: SampleSource + ?Sized>(sources: &[&S], cfg: &NetConfig, seed: u64) -> Result<TrainingBatch> {
    generate_data_with(sources, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Mean squared error, averaged over every element of every row.
pub fn mse(preds: &[Vec<Vector>], targets: &[Vec<Vector>]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Shape {
            op: "mse rows",
            left: (preds.len(), 1),
            right: (targets.len(), 1),
        });
    }
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        total += series_mse(p, t)?;
    }
    Ok(total / preds.len() as f64)
}

/// `(1/n) Σ (y − z)²` over one row (all `k` components).
pub fn series_mse(preds: &[Vector], targets: &[Vector]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Shape {
            op: "mse steps",
            left: (preds.len(), 1),
            right: (targets.len(), 1),
        });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in preds.iter().zip(targets) {
        if p.len() != t.len() {
            return Err(Error::Shape {
                op: "mse width",
                left: (p.len(), 1),
                right: (t.len(), 1),
            });
        }
        for (a, b) in p.as_slice().iter().zip(t.as_slice()) {
            sum += (b - a) * (b - a);
        }
        count += p.len();
    }
    Ok(sum / count as f64)
}

/// Gradient of the loss with respect to every network tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LstmCellParams>,
    pub dense: DenseParams,
}

impl Gradients {
    pub fn zeros_like(net: &StackedLstm) -> Self {
        let cfg = net.config();
        Gradients {
            layers: (0..cfg.ell)
                .map(|l| LstmCellParams::zeros(cfg.layer_input(l), cfg.hidden))
                .collect(),
            dense: DenseParams::zeros(cfg.hidden, cfg.k),
        }
    }

    /// Same order as [`StackedLstm::tensors`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(self.layers.len() * 9 + 2);
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.extend(self.dense.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(self.layers.len() * 9 + 2);
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend(self.dense.tensors_mut());
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|g| g.is_finite()))
    }

    /// Rescales so the global norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for t in self.tensors_mut() {
                t.iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }
}

/// Loss and exact gradients for a batch of taped forward passes.
///
/// The loss is [`mse`] over all rows. Tapes may come from either forward mode;
/// for rollout tapes the gradient also flows through the fed-back predictions.
pub fn bptt(net: &StackedLstm, tapes: &[ForwardTape], targets: &[Vec<Vector>]) -> Result<(f64, Gradients)> {
    if tapes.len() != targets.len() || tapes.is_empty() {
        return Err(Error::Shape {
            op: "bptt rows",
            left: (tapes.len(), 1),
            right: (targets.len(), 1),
        });
    }
    let cfg = *net.config();
    let mut grads = Gradients::zeros_like(net);
    let mut loss = 0.0;
    for (tape, target) in tapes.iter().zip(targets) {
        if tape.outputs.len() != target.len() || target.is_empty() {
            return Err(Error::Shape {
                op: "bptt steps",
                left: (tape.outputs.len(), 1),
                right: (target.len(), 1),
            });
        }
        if tape.steps.first().map(|s| s.len()) != Some(cfg.ell) {
            return Err(Error::Shape {
                op: "bptt layers",
                left: (tape.steps.first().map_or(0, |s| s.len()), 1),
                right: (cfg.ell, 1),
            });
        }
        let norm = 1.0 / (tapes.len() * target.len() * cfg.k) as f64;
        let mut dz = Vec::with_capacity(target.len());
        for (z, y) in tape.outputs.iter().zip(target) {
            if y.len() != cfg.k {
                return Err(Error::Shape {
                    op: "bptt target width",
                    left: (y.len(), 1),
                    right: (cfg.k, 1),
                });
            }
            let mut d = Vec::with_capacity(cfg.k);
            for (a, b) in z.iter().zip(y.as_slice()) {
                loss += (a - b) * (a - b) * norm;
                d.push(2.0 * (a - b) * norm);
            }
            dz.push(d);
        }
        backward_row(net, tape, &mut dz, &mut grads);
    }
    if !cfg.learn_initial_state {
        for layer in &mut grads.layers {
            layer.c_0.as_mut_slice().fill(0.0);
        }
    }
    Ok((loss, grads))
}

fn backward_row(net: &StackedLstm, tape: &ForwardTape, dz: &mut [Vec<f64>], grads: &mut Gradients) {
    let cfg = net.config();
    let hidden = cfg.hidden;
    let layers = net.layers();
    let top = layers.len() - 1;
    let mut dh_next = vec![vec![0.0; hidden]; layers.len()];
    let mut dc_next = vec![vec![0.0; hidden]; layers.len()];

    for t in (0..tape.steps.len()).rev() {
        let mut dh = dh_next[top].clone();
        if t >= tape.first_output {
            let dzt = &dz[t - tape.first_output];
            let h_top = &tape.steps[t][top].h;
            grads.dense.w_d.add_outer(dzt, h_top);
            for (b, d) in grads.dense.b_d.as_mut_slice().iter_mut().zip(dzt) {
                *b += d;
            }
            net.dense().w_d.matvec_t_acc(dzt, &mut dh);
        }
        for l in (0..layers.len()).rev() {
            let s = &tape.steps[t][l];
            let p = &layers[l];
            let g = &mut grads.layers[l];
            let n = s.h.len();
            let mut da_i = vec![0.0; n];
            let mut da_f = vec![0.0; n];
            let mut da_o = vec![0.0; n];
            let mut da_g = vec![0.0; n];
            let mut dc_prev = vec![0.0; n];
            for j in 0..n {
                let dc = dc_next[l][j] + dh[j] * s.o[j] * (1.0 - s.tanh_c[j] * s.tanh_c[j]);
                let d_o = dh[j] * s.tanh_c[j];
                let d_i = dc * s.g[j];
                let d_g = dc * s.i[j];
                let d_f = dc * s.c_prev[j];
                dc_prev[j] = dc * s.f[j];
                da_i[j] = d_i * s.i[j] * (1.0 - s.i[j]);
                da_f[j] = d_f * s.f[j] * (1.0 - s.f[j]);
                da_o[j] = d_o * s.o[j] * (1.0 - s.o[j]);
                da_g[j] = d_g * (1.0 - s.g[j] * s.g[j]);
            }
            let mut dv = vec![0.0; s.v.len()];
            for (w, gw, gb, da) in [
                (&p.w_i, &mut g.w_i, &mut g.b_i, &da_i),
                (&p.w_f, &mut g.w_f, &mut g.b_f, &da_f),
                (&p.w_o, &mut g.w_o, &mut g.b_o, &da_o),
                (&p.w_c, &mut g.w_c, &mut g.b_c, &da_g),
            ] {
                gw.add_outer(da, &s.v);
                for (b, d) in gb.as_mut_slice().iter_mut().zip(da) {
                    *b += d;
                }
                w.matvec_t_acc(da, &mut dv);
            }
            let input = cfg.layer_input(l);
            let (dx, dh_prev) = dv.split_at(input);
            dh_next[l].copy_from_slice(dh_prev);
            dc_next[l] = dc_prev;
            if l > 0 {
                // Layer below at this step: its recurrent gradient plus what flows down.
                dh = dh_next[l - 1].iter().zip(dx).map(|(a, b)| a + b).collect();
            } else if tape.feedback && t > tape.first_output {
                for (d, x) in dz[t - 1 - tape.first_output].iter_mut().zip(dx) {
                    *d += x;
                }
            }
        }
    }
    for (g, dc) in grads.layers.iter_mut().zip(&dc_next) {
        for (a, b) in g.c_0.as_mut_slice().iter_mut().zip(dc) {
            *a += b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter Adam moments, flattened in tensor order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub hyper: AdamConfig,
}

impl AdamState {
    pub fn new(param_count: usize, hyper: AdamConfig) -> Self {
        AdamState {
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            step_count: 0,
            hyper,
        }
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) -> Result<()> {
        let total: usize = params.iter().map(|p| p.len()).sum();
        let grad_total: usize = grads.iter().map(|g| g.len()).sum();
        if params.len() != grads.len() || total != grad_total || total != self.first_moment.len() {
            return Err(Error::Shape {
                op: "adam_step",
                left: (total, params.len()),
                right: (grad_total, grads.len()),
            });
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::Divergence {
                iteration: self.step_count as usize,
                what: "gradient",
            });
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.hyper;
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut offset = 0;
        for (p, g) in params.into_iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::Shape {
                    op: "adam_step tensor",
                    left: (p.len(), 1),
                    right: (g.len(), 1),
                });
            }
            let m = &mut self.first_moment[offset..offset + p.len()];
            let v = &mut self.second_moment[offset..offset + p.len()];
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
            offset += p.len();
        }
        Ok(())
    }
}

pub fn adam_step(state: &mut AdamState, net: &mut StackedLstm, grads: &Gradients) -> Result<()> {
    state.step(net.tensors_mut(), grads.tensors())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    /// Stop once the test error falls below this.
    pub e_th: f64,
    /// Maximum number of iterations.
    pub it_max: usize,
    /// Devices (windows) per batch.
    pub m: usize,
    pub adam: AdamConfig,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Fixed test windows evaluated after every iteration.
    pub test_windows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            net: NetConfig::default(),
            e_th: 5e-5,
            it_max: 1000,
            m: 4,
            adam: AdamConfig::default(),
            clip_norm: Some(5.0),
            test_windows: 1,
        }
    }
}

impl TrainConfig {
    /// Small single-core configuration: hidden=16, ell=2, it_max=300, with a
    /// larger step size and 16 test windows so 300 iterations suffice.
    pub fn desk_scale() -> Self {
        TrainConfig {
            net: NetConfig {
                hidden: 16,
                ell: 2,
                ..NetConfig::default()
            },
            it_max: 300,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            test_windows: 16,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if !(self.e_th > 0.0) {
            return Err(Error::Config("e_th must be positive".into()));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be positive".into()));
        }
        if self.test_windows == 0 {
            return Err(Error::Config("test_windows must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub train_mse: f64,
    pub test_mse: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Checkpointed network with the lowest test error seen.
    pub best: StackedLstm,
    /// Test error of `best`; infinite when no iteration ran.
    pub best_test_mse: f64,
    pub history: Vec<HistoryRow>,
}

/// Salt separating the test-window stream from the training stream.
const TEST_STREAM_SALT: u64 = 0x7e57_7e57_7e57_7e57;

/// Trains a freshly initialized network.
pub fn train(training: &[Sequence], test: &Sequence, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let net = init_params(cfg.net, seed)?;
    train_from(net, training, test, cfg, seed)
}

/// Trains starting from `initial`.
///
/// Each iteration draws a batch, takes one Adam step on the teacher-forced
/// loss, then scores the rolled-out predictions on fixed test windows. The
/// network with the lowest test error is kept. Stops after `it_max`
/// iterations or once the test error drops below `e_th`.
pub fn train_from(
    initial: StackedLstm,
    training: &[Sequence],
    test: &Sequence,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if *initial.config() != cfg.net {
        return Err(Error::Config("initial network does not match the training config".into()));
    }
    if training.is_empty() {
        return Err(Error::Config("at least one training device is required".into()));
    }
    if training.iter().any(|s| s.id == test.id) {
        return Err(Error::Config(format!("test device `{}` is also a training device", test.id)));
    }
    if cfg.m > training.len() {
        return Err(Error::Config(format!(
            "m = {} exceeds the {} available training devices",
            cfg.m,
            training.len()
        )));
    }
    let window = cfg.net.window();
    for s in training.iter().chain(std::iter::once(test)) {
        if s.len() < window {
            return Err(Error::InsufficientData {
                device: s.id.clone(),
                len: s.len(),
                need: window,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_rng = ChaCha8Rng::seed_from_u64(seed ^ TEST_STREAM_SALT);
    let test_batch = generate_data_with(&vec![test; cfg.test_windows], &cfg.net, &mut test_rng)?;

    let mut net = initial;
    let mut adam = AdamState::new(net.param_count(), cfg.adam);
    let mut best = net.clone();
    let mut best_test_mse = f64::INFINITY;
    let mut history = Vec::new();
    let mut error = f64::INFINITY;
    let mut iteration = 0;

    while iteration < cfg.it_max && error >= cfg.e_th {
        let chosen: Vec<&Sequence> = if cfg.m == training.len() {
            training.iter().collect()
        } else {
            let mut idx = sample_indices(&mut rng, training.len(), cfg.m).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| &training[i]).collect()
        };
        let batch = generate_data_with(&chosen, &cfg.net, &mut rng)?;
        let mut tapes = Vec::with_capacity(batch.rows());
        for x in &batch.x {
            tapes.push(net.forward_teacher(x)?.1);
        }
        let (train_mse, mut grads) = bptt(&net, &tapes, &batch.y)?;
        if !train_mse.is_finite() {
            return Err(Error::Divergence {
                iteration,
                what: "training loss",
            });
        }
        if let Some(max) = cfg.clip_norm {
            grads.clip_global_norm(max);
        }
        adam_step(&mut adam, &mut net, &grads).map_err(|e| match e {
            Error::Divergence { what, .. } => Error::Divergence { iteration, what },
            other => other,
        })?;

        error = rollout_batch_mse(&net, &test_batch)?;
        if !error.is_finite() {
            return Err(Error::Divergence {
                iteration,
                what: "test loss",
            });
        }
        if error < best_test_mse {
            best_test_mse = error;
            best = net.clone();
        }
        iteration += 1;
        history.push(HistoryRow {
            iteration,
            train_mse,
            test_mse: error,
        });
    }
    Ok(TrainOutcome {
        best,
        best_test_mse,
        history,
    })
}

/// MSE of rolled-out predictions over a batch's windows.
pub fn rollout_batch_mse(net: &StackedLstm, batch: &TrainingBatch) -> Result<f64> {
    let tau = net.config().tau;
    let mut preds = Vec::with_capacity(batch.rows());
    for x in &batch.x {
        let (p, _) = net.forward(&x[..tau])?;
        preds.push(p);
    }
    mse(&preds, &batch.y)
}

/// Mean rolled-out MSE over windows starting every `stride` samples.
pub fn evaluate_windows(net: &StackedLstm, seq: &Sequence, stride: usize) -> Result<f64> {
    let cfg = net.config();
    let window = cfg.window();
    if seq.len() < window {
        return Err(Error::InsufficientData {
            device: seq.id.clone(),
            len: seq.len(),
            need: window,
        });
    }
    let stride = stride.max(1);
    let mut total = 0.0;
    let mut count = 0usize;
    for start in (0..=seq.len() - window).step_by(stride) {
        let (preds, _) = net.forward(&seq.steps[start..start + cfg.tau])?;
        total += series_mse(&preds, &seq.steps[start + cfg.tau..start + window])?;
        count += 1;
    }
    Ok(total / count as f64)
}

/// Outcome of training on every device except one.
#[derive(Clone, Debug)]
pub struct HoldoutRun {
    pub outcome: TrainOutcome,
    /// Fitted on the training devices only.
    pub normalizer: Normalizer,
    pub holdout: Sequence,
}

/// Leave-one-out: normalizes with the other devices' range, trains on them
/// with `cfg.m` clamped to their count, and tests on `traces[holdout]`.
pub fn train_holdout(traces: &[DeviceTrace], holdout: usize, cfg: &TrainConfig, seed: u64) -> Result<HoldoutRun> {
    if holdout >= traces.len() {
        return Err(Error::Config(format!(
            "holdout index {holdout} out of range for {} devices",
            traces.len()
        )));
    }
    let others: Vec<&DeviceTrace> = traces
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != holdout)
        .map(|(_, t)| t)
        .collect();
    if others.is_empty() {
        return Err(Error::Config("leave-one-out needs at least two devices".into()));
    }
    let normalizer = Normalizer::fit(others.iter().copied())?;
    let training: Vec<Sequence> = others.iter().map(|t| normalizer.sequence(t)).collect();
    let holdout = normalizer.sequence(&traces[holdout]);
    let mut cfg = *cfg;
    cfg.m = cfg.m.min(training.len());
    let outcome = train(&training, &holdout, &cfg, seed)?;
    Ok(HoldoutRun {
        outcome,
        normalizer,
        holdout,
    })
}

/// Rolls the network forward from the last `tau` values of `history_ohms`
/// and returns `horizon` predictions in ohms. Requires `k == 1`.
pub fn forecast_ohms(net: &StackedLstm, nz: &Normalizer, history_ohms: &[f64], horizon: usize) -> Result<Vec<f64>> {
    let cfg = net.config();
    if cfg.k != 1 {
        return Err(Error::Config(format!("scalar forecasting needs k=1, got k={}", cfg.k)));
    }
    if history_ohms.len() < cfg.tau {
        return Err(Error::InsufficientData {
            device: "context".into(),
            len: history_ohms.len(),
            need: cfg.tau,
        });
    }
    let context: Vec<Vector> = history_ohms[history_ohms.len() - cfg.tau..]
        .iter()
        .map(|&v| Vector::from(vec![nz.normalize_value(v)]))
        .collect();
    let preds = net.rollout(&context, horizon)?;
    Ok(preds.iter().map(|p| nz.denormalize_value(p[0])).collect())
}

/// Training history as CSV (`iteration,train_mse,test_mse`).
pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("iteration,train_mse,test_mse\n");
    for row in history {
        let _ = writeln!(
            out,
            "{},{},{}",
            row.iteration,
            fmt_sig(row.train_mse, 6),
            fmt_sig(row.test_mse, 6)
        );
    }
    out
}
