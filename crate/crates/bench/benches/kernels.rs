use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use drift_bench::{batch, desk_config, matrix, network, snapshot};
use drift_core::edgecloud::ModelSnapshot;
use drift_core::linalg::Vector;
use drift_core::network::lstm_cell_step;
use drift_core::training::bptt;

fn matvec(c: &mut Criterion) {
    let mut g = c.benchmark_group("matvec");
    for n in [16, 64, 256] {
        let m = matrix(n, n + 1);
        let v: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| b.iter(|| m.matvec(black_box(&v)).unwrap()));
    }
    g.finish();
}

fn cell_step(c: &mut Criterion) {
    let net = network(desk_config());
    let p = &net.layers()[1];
    let x = Vector::from(vec![0.1; 16]);
    let h = Vector::from(vec![0.2; 16]);
    let s = Vector::from(vec![-0.3; 16]);
    c.bench_function("lstm_cell_step/h16", |b| b.iter(|| lstm_cell_step(p, black_box(&x), &h, &s).unwrap()));
}

fn forward_backward(c: &mut Criterion) {
    let cfg = desk_config();
    let net = network(cfg);
    let batch = batch(&cfg, 4);
    c.bench_function("forward_rollout/desk", |b| b.iter(|| net.forward(black_box(&batch.x[0][..cfg.tau])).unwrap()));
    c.bench_function("forward_teacher/desk", |b| b.iter(|| net.forward_teacher(black_box(&batch.x[0])).unwrap()));
    let tapes: Vec<_> = batch.x.iter().map(|x| net.forward_teacher(x).unwrap().1).collect();
    c.bench_function("bptt/desk_m4", |b| b.iter(|| bptt(&net, black_box(&tapes), &batch.y).unwrap()));
}

fn snapshot_codec(c: &mut Criterion) {
    let s = snapshot(desk_config());
    let bytes = s.encode();
    c.bench_function("snapshot_encode/desk", |b| b.iter(|| black_box(&s).encode()));
    c.bench_function("snapshot_decode/desk", |b| b.iter(|| ModelSnapshot::decode(black_box(&bytes), None).unwrap()));
}

criterion_group!(benches, matvec, cell_step, forward_backward, snapshot_codec);
criterion_main!(benches);
