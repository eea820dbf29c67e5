mod common;

use common::*;
use drift_core::linalg::Vector;
use drift_core::network::{lstm_cell_step, rnn_cell_step, NetConfig, StackedLstm};
use drift_core::training::{bptt, generate_data};

#[test]
fn lstm_cell_matches_scalar_oracle() {
    let mut r = rng(11);
    for _ in 0..100 {
        let p = random_lstm(&mut r, 2, 3);
        let x = random_vector(&mut r, 2, 2.0);
        let h = random_vector(&mut r, 3, 1.0);
        let c = random_vector(&mut r, 3, 1.0);
        let (h_t, c_t) = lstm_cell_step(&p, &x, &h, &c).unwrap();
        let (h_o, c_o) = lstm_scalar(&p, x.as_slice(), h.as_slice(), c.as_slice());
        for (a, b) in h_t.as_slice().iter().zip(&h_o).chain(c_t.as_slice().iter().zip(&c_o)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn rnn_cell_matches_scalar_oracle() {
    let mut r = rng(12);
    for _ in 0..100 {
        let p = random_rnn(&mut r, 2, 2, 1);
        let x = random_vector(&mut r, 2, 2.0);
        let c = random_vector(&mut r, 2, 1.0);
        let (z, c_t) = rnn_cell_step(&p, &x, &c).unwrap();
        let (z_o, c_o) = rnn_scalar(&p, x.as_slice(), c.as_slice());
        for (a, b) in z.as_slice().iter().zip(&z_o).chain(c_t.as_slice().iter().zip(&c_o)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn single_unit_forward_matches_hand_composition() {
    use drift_core::linalg::Matrix;
    use drift_core::network::{DenseParams, LstmCellParams};
    let cfg = NetConfig {
        k: 1,
        tau: 1,
        n: 1,
        hidden: 1,
        ell: 1,
        learn_initial_state: true,
    };
    let m = |a: f64, b: f64| Matrix::new(1, 2, vec![a, b]).unwrap();
    let v = |a: f64| Vector::from(vec![a]);
    let layer = LstmCellParams {
        w_i: m(0.5, -0.3),
        w_o: m(-0.7, 0.2),
        w_f: m(0.9, 0.4),
        w_c: m(1.1, -0.6),
        b_i: v(0.1),
        b_o: v(-0.2),
        b_f: v(0.3),
        b_c: v(0.05),
        c_0: v(0.25),
    };
    let dense = DenseParams {
        w_d: Matrix::new(1, 1, vec![1.5]).unwrap(),
        b_d: v(-0.1),
    };
    let net = StackedLstm::new(cfg, vec![layer], dense).unwrap();
    let x = 0.6;
    // h_prev = 0, c_prev = 0.25
    let s = |z: f64| 1.0 / (1.0 + (-z).exp());
    let i = s(0.5 * x + 0.1);
    let f = s(0.9 * x + 0.3);
    let o = s(-0.7 * x - 0.2);
    let g = (1.1 * x + 0.05f64).tanh();
    let c = f * 0.25 + i * g;
    let h = o * c.tanh();
    let expect = 1.5 * h - 0.1;
    let (preds, _) = net.forward(&[v(x)]).unwrap();
    assert!((preds[0][0] - expect).abs() < 1e-15, "{} vs {expect}", preds[0][0]);
}

#[test]
fn teacher_forced_gradients_match_finite_differences() {
    for seed in 0..5 {
        let err = gradient_error(seed, false);
        assert!(err < 1e-4, "seed {seed}: max relative error {err:e}");
    }
}

#[test]
fn rollout_gradients_match_finite_differences() {
    for seed in 0..5 {
        let err = gradient_error(seed, true);
        assert!(err < 1e-4, "seed {seed}: max relative error {err:e}");
    }
}

#[test]
fn dense_bias_gradient_closed_form() {
    let net = random_net(3);
    let a = wavy("a", 0.1, 12);
    let b = wavy("b", 2.0, 12);
    let batch = generate_data(&[&a, &b], net.config(), 1).unwrap();
    let mut tapes = Vec::new();
    let mut expect = 0.0;
    let (m, n) = (batch.rows() as f64, net.config().n as f64);
    for (x, y) in batch.x.iter().zip(&batch.y) {
        let (preds, tape) = net.forward_teacher(x).unwrap();
        for (z, t) in preds.iter().zip(y) {
            expect += 2.0 * (z[0] - t[0]) / n / m;
        }
        tapes.push(tape);
    }
    let (_, grads) = bptt(&net, &tapes, &batch.y).unwrap();
    assert!((grads.dense.b_d[0] - expect).abs() < 1e-14);
}
