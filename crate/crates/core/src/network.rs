//! Recurrent cells and the stacked LSTM forecaster.
//!
//! The forecaster is `ell` LSTM layers followed by a dense head mapping the
//! top hidden state back to `k` outputs. Two unrolled forward modes share the
//! same cell code:
//!
//! * teacher forcing ([`StackedLstm::forward_teacher`]): `tau + n - 1` true
//!   inputs, one prediction per step for the last `n` steps;
//! * autoregressive rollout ([`StackedLstm::forward`] / [`StackedLstm::rollout`]):
//!   `tau` context inputs, after which each prediction is fed back as the next
//!   input.
//!
//! Both return a [`ForwardTape`] that the trainer differentiates through.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::{sigmoid_scalar, Matrix, Vector};

/// Activation applied to the vanilla RNN state (`c_t = zeta(i_t)`).
pub const RNN_STATE_ACTIVATION: fn(f64) -> f64 = f64::tanh;
/// Activation applied to the vanilla RNN output (`z_t = xi(o_t)`); identity so
/// the cell can regress unbounded targets.
pub const RNN_OUTPUT_ACTIVATION: fn(f64) -> f64 = identity;

fn identity(x: f64) -> f64 {
    x
}

/// Standard deviation of the truncated normal used by [`init_params`].
pub const INIT_SIGMA: f64 = 0.1;
/// Samples further than this many standard deviations from zero are redrawn.
pub const INIT_CUTOFF_SIGMAS: f64 = 2.0;
/// Offset added to the sampled forget-gate biases so fresh cells start out
/// retaining most of their state.
pub const FORGET_BIAS_INIT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetConfig {
    /// Input (and output) width per time step.
    pub k: usize,
    /// Context length fed before the first prediction.
    pub tau: usize,
    /// Number of predicted steps.
    pub n: usize,
    /// Hidden width of every LSTM layer.
    pub hidden: usize,
    /// Number of stacked LSTM layers.
    pub ell: usize,
    /// Whether each layer's initial cell state `c_0` is trained.
    pub learn_initial_state: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            k: 1,
            tau: 21,
            n: 104,
            hidden: 64,
            ell: 4,
            learn_initial_state: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("k", self.k),
            ("tau", self.tau),
            ("n", self.n),
            ("hidden", self.hidden),
            ("ell", self.ell),
        ] {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Input width of layer `layer` (0-based).
    pub fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.k
        } else {
            self.hidden
        }
    }

    /// Number of trainable scalars, or `None` on overflow.
    pub fn param_count(&self) -> Option<usize> {
        let h = self.hidden;
        let mut total = self.k.checked_mul(h)?.checked_add(self.k)?;
        for layer in 0..self.ell {
            let v = self.layer_input(layer).checked_add(h)?;
            let per = h.checked_mul(v)?.checked_mul(4)?.checked_add(h.checked_mul(5)?)?;
            total = total.checked_add(per)?;
        }
        Some(total)
    }

    /// Length of one training window (`tau + n`).
    pub fn window(&self) -> usize {
        self.tau + self.n
    }
}

fn check_len(op: &'static str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape {
            op,
            left: (got, 1),
            right: (want, 1),
        });
    }
    Ok(())
}

fn check_shape(op: &'static str, m: &Matrix, want: (usize, usize)) -> Result<()> {
    if m.shape() != want {
        return Err(Error::Shape {
            op,
            left: m.shape(),
            right: want,
        });
    }
    Ok(())
}

/// Parameters of a vanilla recurrent cell.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnCellParams {
    pub w_i: Matrix,
    pub w_c: Matrix,
    pub w_o: Matrix,
    pub b_i: Vector,
    pub b_o: Vector,
    pub c_0: Vector,
}

impl RnnCellParams {
    pub fn zeros(input: usize, hidden: usize, out: usize) -> Self {
        RnnCellParams {
            w_i: Matrix::zeros(hidden, input),
            w_c: Matrix::zeros(hidden, hidden),
            w_o: Matrix::zeros(out, hidden),
            b_i: Vector::zeros(hidden),
            b_o: Vector::zeros(out),
            c_0: Vector::zeros(hidden),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let hidden = self.w_c.rows();
        let out = self.w_o.rows();
        check_shape("rnn w_c", &self.w_c, (hidden, hidden))?;
        check_len("rnn w_i", self.w_i.rows(), hidden)?;
        check_shape("rnn w_o", &self.w_o, (out, hidden))?;
        check_len("rnn b_i", self.b_i.len(), hidden)?;
        check_len("rnn b_o", self.b_o.len(), out)?;
        check_len("rnn c_0", self.c_0.len(), hidden)
    }
}

/// One vanilla RNN step: returns `(z_t, c_t)`.
pub fn rnn_cell_step(p: &RnnCellParams, x_t: &Vector, c_prev: &Vector) -> Result<(Vector, Vector)> {
    p.validate()?;
    check_len("rnn_cell_step x_t", x_t.len(), p.w_i.cols())?;
    check_len("rnn_cell_step c_prev", c_prev.len(), p.w_c.rows())?;
    let hidden = p.w_c.rows();
    let mut pre = vec![0.0; hidden];
    let mut rec = vec![0.0; hidden];
    p.w_i.matvec_into(x_t.as_slice(), &mut pre);
    p.w_c.matvec_into(c_prev.as_slice(), &mut rec);
    let c_t: Vec<f64> = pre
        .iter()
        .zip(&rec)
        .zip(p.b_i.as_slice())
        .map(|((a, b), bias)| RNN_STATE_ACTIVATION(a + b + bias))
        .collect();
    let mut o_t = vec![0.0; p.w_o.rows()];
    p.w_o.matvec_into(&c_t, &mut o_t);
    let z_t: Vec<f64> = o_t
        .iter()
        .zip(p.b_o.as_slice())
        .map(|(o, b)| RNN_OUTPUT_ACTIVATION(o + b))
        .collect();
    Ok((z_t.into(), c_t.into()))
}

/// Parameters of one LSTM layer. Gate matrices act on `v_t = [x_t, h_{t-1}]`
/// and are `hidden × (input + hidden)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCellParams {
    pub w_i: Matrix,
    pub w_o: Matrix,
    pub w_f: Matrix,
    pub w_c: Matrix,
    pub b_i: Vector,
    pub b_o: Vector,
    pub b_f: Vector,
    pub b_c: Vector,
    pub c_0: Vector,
}

impl LstmCellParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = Matrix::zeros(hidden, input + hidden);
        let b = Vector::zeros(hidden);
        LstmCellParams {
            w_i: w.clone(),
            w_o: w.clone(),
            w_f: w.clone(),
            w_c: w,
            b_i: b.clone(),
            b_o: b.clone(),
            b_f: b.clone(),
            b_c: b.clone(),
            c_0: b,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_i.rows()
    }

    pub fn input_width(&self) -> usize {
        self.w_i.cols() - self.w_i.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.w_i.shape();
        if shape.1 <= shape.0 {
            return Err(Error::Shape {
                op: "lstm w_i",
                left: shape,
                right: (shape.0, shape.0 + 1),
            });
        }
        for (op, m) in [("lstm w_o", &self.w_o), ("lstm w_f", &self.w_f), ("lstm w_c", &self.w_c)] {
            check_shape(op, m, shape)?;
        }
        for (op, b) in [
            ("lstm b_i", &self.b_i),
            ("lstm b_o", &self.b_o),
            ("lstm b_f", &self.b_f),
            ("lstm b_c", &self.b_c),
            ("lstm c_0", &self.c_0),
        ] {
            check_len(op, b.len(), shape.0)?;
        }
        Ok(())
    }

    /// Parameter tensors in serialization order.
    pub fn tensors(&self) -> [&[f64]; 9] {
        [
            self.w_i.as_slice(),
            self.w_o.as_slice(),
            self.w_f.as_slice(),
            self.w_c.as_slice(),
            self.b_i.as_slice(),
            self.b_o.as_slice(),
            self.b_f.as_slice(),
            self.b_c.as_slice(),
            self.c_0.as_slice(),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 9] {
        [
            self.w_i.as_mut_slice(),
            self.w_o.as_mut_slice(),
            self.w_f.as_mut_slice(),
            self.w_c.as_mut_slice(),
            self.b_i.as_mut_slice(),
            self.b_o.as_mut_slice(),
            self.b_f.as_mut_slice(),
            self.b_c.as_mut_slice(),
            self.c_0.as_mut_slice(),
        ]
    }
}

/// Cached activations of one LSTM layer at one time step.
#[derive(Clone, Debug)]
pub struct LayerStep {
    /// `[x_t, h_{t-1}]`.
    pub v: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub o: Vec<f64>,
    /// Candidate memory `c̃_t`.
    pub g: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

fn gate(w: &Matrix, b: &Vector, v: &[f64], act: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; w.rows()];
    w.matvec_into(v, &mut out);
    for (o, bias) in out.iter_mut().zip(b.as_slice()) {
        *o = act(*o + bias);
    }
    out
}

/// Shapes are assumed validated.
fn lstm_step_cached(p: &LstmCellParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> LayerStep {
    let mut v = Vec::with_capacity(x.len() + h_prev.len());
    v.extend_from_slice(x);
    v.extend_from_slice(h_prev);
    let i = gate(&p.w_i, &p.b_i, &v, sigmoid_scalar);
    let f = gate(&p.w_f, &p.b_f, &v, sigmoid_scalar);
    let o = gate(&p.w_o, &p.b_o, &v, sigmoid_scalar);
    let g = gate(&p.w_c, &p.b_c, &v, f64::tanh);
    let c: Vec<f64> = (0..g.len()).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|x| x.tanh()).collect();
    let h: Vec<f64> = o.iter().zip(&tanh_c).map(|(a, b)| a * b).collect();
    LayerStep {
        v,
        i,
        f,
        o,
        g,
        c_prev: c_prev.to_vec(),
        c,
        tanh_c,
        h,
    }
}

/// One LSTM step: returns `(h_t, c_t)`.
pub fn lstm_cell_step(
    p: &LstmCellParams,
    x_t: &Vector,
    h_prev: &Vector,
    c_prev: &Vector,
) -> Result<(Vector, Vector)> {
    p.validate()?;
    check_len("lstm_cell_step x_t", x_t.len(), p.input_width())?;
    check_len("lstm_cell_step h_prev", h_prev.len(), p.hidden())?;
    check_len("lstm_cell_step c_prev", c_prev.len(), p.hidden())?;
    let step = lstm_step_cached(p, x_t.as_slice(), h_prev.as_slice(), c_prev.as_slice());
    Ok((step.h.into(), step.c.into()))
}

/// Output head mapping the top hidden state to `k` values.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub w_d: Matrix,
    pub b_d: Vector,
}

impl DenseParams {
    pub fn zeros(hidden: usize, k: usize) -> Self {
        DenseParams {
            w_d: Matrix::zeros(k, hidden),
            b_d: Vector::zeros(k),
        }
    }

    pub fn tensors(&self) -> [&[f64]; 2] {
        [self.w_d.as_slice(), self.b_d.as_slice()]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [self.w_d.as_mut_slice(), self.b_d.as_mut_slice()]
    }

    fn apply(&self, h: &[f64]) -> Vec<f64> {
        gate(&self.w_d, &self.b_d, h, identity)
    }
}

/// Everything recorded during an unrolled forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTape {
    /// `steps[t][layer]`.
    pub steps: Vec<Vec<LayerStep>>,
    /// Dense outputs, one per predicting step.
    pub outputs: Vec<Vec<f64>>,
    /// Step index that produced `outputs[0]`.
    pub first_output: usize,
    /// True when step `t + 1`'s input is `outputs` of step `t` (rollout mode).
    pub feedback: bool,
}

impl ForwardTape {
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackedLstm {
    layers: Vec<LstmCellParams>,
    dense: DenseParams,
    config: NetConfig,
}

impl StackedLstm {
    pub fn new(config: NetConfig, layers: Vec<LstmCellParams>, dense: DenseParams) -> Result<Self> {
        config.validate()?;
        check_len("stacked layer count", layers.len(), config.ell)?;
        for (idx, layer) in layers.iter().enumerate() {
            layer.validate()?;
            check_shape(
                "stacked layer",
                &layer.w_i,
                (config.hidden, config.layer_input(idx) + config.hidden),
            )?;
        }
        check_shape("dense w_d", &dense.w_d, (config.k, config.hidden))?;
        check_len("dense b_d", dense.b_d.len(), config.k)?;
        Ok(StackedLstm {
            layers,
            dense,
            config,
        })
    }

    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.ell)
            .map(|l| LstmCellParams::zeros(config.layer_input(l), config.hidden))
            .collect();
        StackedLstm::new(config, layers, DenseParams::zeros(config.hidden, config.k))
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LstmCellParams] {
        &self.layers
    }

    pub fn dense(&self) -> &DenseParams {
        &self.dense
    }

    /// All parameter tensors: each layer's nine tensors, then `w_d`, `b_d`.
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

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameters flattened in [`StackedLstm::tensors`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    /// Overwrites every parameter from a flat vector in [`StackedLstm::tensors`] order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len("set_flat", flat.len(), self.param_count())?;
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    fn check_inputs(&self, inputs: &[Vector], want: usize, op: &'static str) -> Result<()> {
        check_len(op, inputs.len(), want)?;
        for x in inputs {
            check_len(op, x.len(), self.config.k)?;
        }
        Ok(())
    }

    /// Inference pass: `tau` context vectors in, `n` rolled-out predictions out.
    pub fn forward(&self, inputs: &[Vector]) -> Result<(Vec<Vector>, ForwardTape)> {
        self.check_inputs(inputs, self.config.tau, "forward inputs")?;
        let tape = self.unroll(inputs, self.config.n, true);
        Ok((outputs_of(&tape), tape))
    }

    /// Training pass: `tau + n - 1` true inputs, predictions for the last `n` steps.
    pub fn forward_teacher(&self, inputs: &[Vector]) -> Result<(Vec<Vector>, ForwardTape)> {
        self.check_inputs(inputs, self.config.tau + self.config.n - 1, "forward_teacher inputs")?;
        let tape = self.unroll(inputs, self.config.n, false);
        Ok((outputs_of(&tape), tape))
    }

    /// Rollout with an arbitrary (non-empty) context and horizon, no tape kept.
    pub fn rollout(&self, context: &[Vector], horizon: usize) -> Result<Vec<Vector>> {
        if context.is_empty() {
            return Err(Error::Shape {
                op: "rollout context",
                left: (0, 1),
                right: (self.config.tau, 1),
            });
        }
        self.check_inputs(context, context.len(), "rollout context")?;
        if horizon == 0 {
            return Ok(Vec::new());
        }
        let (mut h, mut c) = self.initial_state();
        let mut preds = Vec::with_capacity(horizon);
        let mut x: Vec<f64> = Vec::new();
        let total = context.len() + horizon - 1;
        for t in 0..total {
            let input = if t < context.len() { context[t].as_slice() } else { &x };
            let top = self.step_layers(input, &mut h, &mut c, |_, _| {});
            if t + 1 >= context.len() {
                x = self.dense.apply(top);
                preds.push(Vector::from(x.clone()));
            }
        }
        Ok(preds)
    }

    fn initial_state(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let h = vec![vec![0.0; self.config.hidden]; self.layers.len()];
        let c = self.layers.iter().map(|l| l.c_0.as_slice().to_vec()).collect();
        (h, c)
    }

    /// Advances every layer one step, returning the top hidden state.
    fn step_layers<'a>(
        &self,
        input: &[f64],
        h: &'a mut [Vec<f64>],
        c: &mut [Vec<f64>],
        mut record: impl FnMut(usize, LayerStep),
    ) -> &'a [f64] {
        for l in 0..self.layers.len() {
            let step = {
                let x = if l == 0 { input } else { &h[l - 1] };
                lstm_step_cached(&self.layers[l], x, &h[l], &c[l])
            };
            h[l].copy_from_slice(&step.h);
            c[l].copy_from_slice(&step.c);
            record(l, step);
        }
        &h[self.layers.len() - 1]
    }

    fn unroll(&self, inputs: &[Vector], horizon: usize, feedback: bool) -> ForwardTape {
        let first_output = self.config.tau - 1;
        let total = self.config.tau + horizon - 1;
        let (mut h, mut c) = self.initial_state();
        let mut steps = Vec::with_capacity(total);
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(horizon);
        for t in 0..total {
            let fed;
            let input = if feedback && t > first_output {
                fed = outputs.last().cloned().unwrap_or_default();
                fed.as_slice()
            } else {
                inputs[t].as_slice()
            };
            let mut cache = Vec::with_capacity(self.layers.len());
            let top = self.step_layers(input, &mut h, &mut c, |_, s| cache.push(s));
            if t >= first_output {
                outputs.push(self.dense.apply(top));
            }
            steps.push(cache);
        }
        ForwardTape {
            steps,
            outputs,
            first_output,
            feedback,
        }
    }
}

fn outputs_of(tape: &ForwardTape) -> Vec<Vector> {
    tape.outputs.iter().map(|o| Vector::from(o.as_slice())).collect()
}

/// Normal(0, sigma) restricted to `[-cutoff·sigma, cutoff·sigma]` by rejection.
#[derive(Clone, Copy, Debug)]
pub struct TruncatedNormal {
    normal: Normal<f64>,
    bound: f64,
}

impl TruncatedNormal {
    pub fn new(sigma: f64, cutoff_sigmas: f64) -> Self {
        TruncatedNormal {
            normal: Normal::new(0.0, sigma).expect("sigma must be finite and positive"),
            bound: cutoff_sigmas * sigma,
        }
    }
}

impl Distribution<f64> for TruncatedNormal {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let x = self.normal.sample(rng);
            if x.abs() <= self.bound {
                return x;
            }
        }
    }
}

/// Random network: weights and biases from the truncated normal (forget-gate
/// biases shifted by [`FORGET_BIAS_INIT`]), `c_0 = 0`.
pub fn init_params(config: NetConfig, seed: u64) -> Result<StackedLstm> {
    let mut net = StackedLstm::zeros(config)?;
    let dist = TruncatedNormal::new(INIT_SIGMA, INIT_CUTOFF_SIGMAS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut net.layers {
        let [w_i, w_o, w_f, w_c, b_i, b_o, b_f, b_c, _c_0] = layer.tensors_mut();
        for t in [w_i, w_o, w_f, w_c, b_i, b_o, b_f, b_c] {
            t.iter_mut().for_each(|x| *x = dist.sample(&mut rng));
        }
        layer.b_f.as_mut_slice().iter_mut().for_each(|x| *x += FORGET_BIAS_INIT);
    }
    for t in net.dense.tensors_mut() {
        t.iter_mut().for_each(|x| *x = dist.sample(&mut rng));
    }
    Ok(net)
}
