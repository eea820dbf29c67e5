//! Independent reference implementations used by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use drift_core::linalg::{Matrix, Vector};
use drift_core::network::{init_params, LstmCellParams, NetConfig, RnnCellParams, StackedLstm};
use drift_core::training::{bptt, generate_data, mse, Sequence, TrainingBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn affine(w: &Matrix, b: &[f64], v: &[f64], row: usize) -> f64 {
    let mut acc = b[row];
    for col in 0..w.cols() {
        acc += w.get(row, col) * v[col];
    }
    acc
}

/// Element-by-element evaluation of the LSTM cell equations.
pub fn lstm_scalar(p: &LstmCellParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let v: Vec<f64> = x.iter().chain(h_prev).copied().collect();
    let hidden = h_prev.len();
    let mut h = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    for j in 0..hidden {
        let i_t = sig(affine(&p.w_i, p.b_i.as_slice(), &v, j));
        let f_t = sig(affine(&p.w_f, p.b_f.as_slice(), &v, j));
        let o_t = sig(affine(&p.w_o, p.b_o.as_slice(), &v, j));
        let cand = affine(&p.w_c, p.b_c.as_slice(), &v, j).tanh();
        c[j] = f_t * c_prev[j] + i_t * cand;
        h[j] = o_t * c[j].tanh();
    }
    (h, c)
}

/// Element-by-element evaluation of the vanilla RNN cell (tanh state, identity output).
pub fn rnn_scalar(p: &RnnCellParams, x: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hidden = c_prev.len();
    let mut c = vec![0.0; hidden];
    for j in 0..hidden {
        let mut acc = p.b_i[j];
        for col in 0..x.len() {
            acc += p.w_i.get(j, col) * x[col];
        }
        for col in 0..hidden {
            acc += p.w_c.get(j, col) * c_prev[col];
        }
        c[j] = acc.tanh();
    }
    let z = (0..p.w_o.rows()).map(|r| affine(&p.w_o, p.b_o.as_slice(), &c, r)).collect();
    (z, c)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

pub fn random_vector(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vector {
    (0..len).map(|_| rng.random_range(-scale..scale)).collect::<Vec<_>>().into()
}

pub fn random_lstm(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> LstmCellParams {
    let cols = input + hidden;
    LstmCellParams {
        w_i: random_matrix(rng, hidden, cols, 1.0),
        w_o: random_matrix(rng, hidden, cols, 1.0),
        w_f: random_matrix(rng, hidden, cols, 1.0),
        w_c: random_matrix(rng, hidden, cols, 1.0),
        b_i: random_vector(rng, hidden, 1.0),
        b_o: random_vector(rng, hidden, 1.0),
        b_f: random_vector(rng, hidden, 1.0),
        b_c: random_vector(rng, hidden, 1.0),
        c_0: random_vector(rng, hidden, 1.0),
    }
}

pub fn random_rnn(rng: &mut ChaCha8Rng, input: usize, hidden: usize, out: usize) -> RnnCellParams {
    RnnCellParams {
        w_i: random_matrix(rng, hidden, input, 1.0),
        w_c: random_matrix(rng, hidden, hidden, 1.0),
        w_o: random_matrix(rng, out, hidden, 1.0),
        b_i: random_vector(rng, hidden, 1.0),
        b_o: random_vector(rng, out, 1.0),
        c_0: random_vector(rng, hidden, 1.0),
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Teacher-forced batch loss as a function of the flat parameter vector.
pub fn teacher_loss(net: &StackedLstm, flat: &[f64], batch: &TrainingBatch) -> f64 {
    let mut probe = net.clone();
    probe.set_flat(flat).unwrap();
    let preds: Vec<_> = batch.x.iter().map(|x| probe.forward_teacher(x).unwrap().0).collect();
    mse(&preds, &batch.y).unwrap()
}

/// Rollout batch loss as a function of the flat parameter vector.
pub fn rollout_loss(net: &StackedLstm, flat: &[f64], batch: &TrainingBatch) -> f64 {
    let mut probe = net.clone();
    probe.set_flat(flat).unwrap();
    let tau = probe.config().tau;
    let preds: Vec<_> = batch.x.iter().map(|x| probe.forward(&x[..tau]).unwrap().0).collect();
    mse(&preds, &batch.y).unwrap()
}

/// Central finite differences of `loss` at `flat`.
pub fn finite_difference(flat: &[f64], step: f64, loss: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = flat.to_vec();
    (0..flat.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = loss(&probe);
            probe[i] = orig - step;
            let down = loss(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Floor on the relative-error denominator; FD noise at step 1e-6 is ~1e-10.
pub const REL_FLOOR: f64 = 1e-6;

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

pub fn small() -> NetConfig {
    NetConfig {
        k: 1,
        tau: 5,
        n: 3,
        hidden: 4,
        ell: 2,
        learn_initial_state: true,
    }
}

pub fn wavy(id: &str, phase: f64, len: usize) -> Sequence {
    let values: Vec<f64> = (0..len).map(|t| (0.3 * t as f64 + phase).sin() * 0.8).collect();
    Sequence::from_scalars(id, &values)
}

/// Random network with c_0 perturbed away from zero so its gradient is exercised.
pub fn random_net(seed: u64) -> StackedLstm {
    let mut net = init_params(small(), seed).unwrap();
    let mut r = rng(seed + 1000);
    let mut flat = net.to_flat();
    for x in flat.iter_mut() {
        *x += random_vector(&mut r, 1, 0.3)[0];
    }
    net.set_flat(&flat).unwrap();
    net
}

/// Max relative error between BPTT and finite-difference gradients for one seeded net.
pub fn gradient_error(seed: u64, rollout: bool) -> f64 {
    let net = random_net(seed);
    let a = wavy("a", seed as f64 * 0.37, 20);
    let b = wavy("b", seed as f64 * 1.91 + 0.5, 20);
    let batch = generate_data(&[&a, &b], net.config(), seed).unwrap();
    let tau = net.config().tau;
    let tapes: Vec<_> = batch
        .x
        .iter()
        .map(|x| {
            if rollout {
                net.forward(&x[..tau]).unwrap().1
            } else {
                net.forward_teacher(x).unwrap().1
            }
        })
        .collect();
    let (loss, grads) = bptt(&net, &tapes, &batch.y).unwrap();
    let flat = net.to_flat();
    let reference = if rollout {
        rollout_loss(&net, &flat, &batch)
    } else {
        teacher_loss(&net, &flat, &batch)
    };
    assert!((loss - reference).abs() < 1e-14);
    let numeric = finite_difference(&flat, 1e-6, |p| {
        if rollout {
            rollout_loss(&net, p, &batch)
        } else {
            teacher_loss(&net, p, &batch)
        }
    });
    max_relative_error(&grads.to_flat(), &numeric)
}
