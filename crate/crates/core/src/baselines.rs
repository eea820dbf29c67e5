//! Classical single-device predictors (constant-velocity Kalman filter and an
//! exponential-growth particle filter) and the detection-point comparison
//! against the LSTM forecaster.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::DeviceTrace;
use crate::error::{Error, Result};
use crate::metrics::{DevicePrediction, DETECTION_THRESHOLD};
use crate::text::fmt_sig;
use crate::training::{forecast_ohms, train_holdout, TrainConfig};

/// Process noise intensity of the constant-velocity model.
pub const KALMAN_Q: f64 = 1e-10;
/// Measurement noise variance (ohm²).
pub const KALMAN_RHO: f64 = 1e-8;

type Mat2 = [[f64; 2]; 2];

fn mat2_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

fn mat2_t(a: &Mat2) -> Mat2 {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

/// Eigenvalues of a symmetric 2×2 matrix, ascending.
pub fn sym2_eigenvalues(m: &Mat2) -> [f64; 2] {
    let mean = 0.5 * (m[0][0] + m[1][1]);
    let half_diff = 0.5 * (m[0][0] - m[1][1]);
    let off = 0.5 * (m[0][1] + m[1][0]);
    let r = half_diff.hypot(off);
    [mean - r, mean + r]
}

/// Constant-velocity filter over `[r, r_dot]` with scalar observations of `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct KalmanModel {
    pub state: [f64; 2],
    pub covariance: Mat2,
    pub process_noise: f64,
    pub measurement_noise: f64,
}

impl KalmanModel {
    /// State `[y0, 0]`, identity covariance.
    pub fn new(y0: f64, q: f64, rho: f64) -> Self {
        KalmanModel {
            state: [y0, 0.0],
            covariance: [[1.0, 0.0], [0.0, 1.0]],
            process_noise: q,
            measurement_noise: rho,
        }
    }

    /// Time update by one sample.
    pub fn predict(&mut self) {
        let f: Mat2 = [[1.0, 1.0], [0.0, 1.0]];
        let [r, v] = self.state;
        self.state = [r + v, v];
        let q = self.process_noise;
        let mut p = mat2_mul(&mat2_mul(&f, &self.covariance), &mat2_t(&f));
        p[0][0] += q / 3.0;
        p[0][1] += q / 2.0;
        p[1][0] += q / 2.0;
        p[1][1] += q;
        self.covariance = p;
    }

    /// Measurement update (Joseph form, re-symmetrized).
    pub fn update(&mut self, y: f64) {
        let p = self.covariance;
        let s = p[0][0] + self.measurement_noise;
        let k = [p[0][0] / s, p[1][0] / s];
        let innovation = y - self.state[0];
        self.state[0] += k[0] * innovation;
        self.state[1] += k[1] * innovation;
        // (I - K H) with H = [1, 0].
        let a: Mat2 = [[1.0 - k[0], 0.0], [-k[1], 1.0]];
        let mut joseph = mat2_mul(&mat2_mul(&a, &p), &mat2_t(&a));
        for i in 0..2 {
            for j in 0..2 {
                joseph[i][j] += k[i] * k[j] * self.measurement_noise;
            }
        }
        let off = 0.5 * (joseph[0][1] + joseph[1][0]);
        joseph[0][1] = off;
        joseph[1][0] = off;
        self.covariance = joseph;
    }

    pub fn forecast(&self, horizon: usize) -> Vec<f64> {
        let [r, v] = self.state;
        (1..=horizon).map(|h| r + v * h as f64).collect()
    }
}

/// Filters `prefix` and extrapolates `horizon` samples past its end.
pub fn kalman_predict(prefix: &[f64], horizon: usize) -> Result<Vec<f64>> {
    Ok(kalman_filter(prefix, KALMAN_Q, KALMAN_RHO)?.forecast(horizon))
}

pub fn kalman_filter(prefix: &[f64], q: f64, rho: f64) -> Result<KalmanModel> {
    if prefix.len() < 2 {
        return Err(Error::TooFewSamples {
            need: 2,
            got: prefix.len(),
        });
    }
    let mut model = KalmanModel::new(prefix[0], q, rho);
    for &y in &prefix[1..] {
        model.predict();
        model.update(y);
    }
    Ok(model)
}

/// Settings of the exponential-growth particle filter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParticleConfig {
    pub particles: usize,
    /// Observation noise standard deviation (ohms).
    pub obs_sigma: f64,
    /// Prior mean and spread of `ln a` (a in ohms).
    pub prior_ln_a: (f64, f64),
    /// Prior mean and spread of `ln b` (b per sample).
    pub prior_ln_b: (f64, f64),
    /// Kernel shrinkage `h` for the post-resampling jitter.
    pub jitter: f64,
}

impl Default for ParticleConfig {
    fn default() -> Self {
        ParticleConfig {
            particles: 1000,
            obs_sigma: 3e-4,
            prior_ln_a: (1e-3f64.ln(), 1.5),
            prior_ln_b: (0.01f64.ln(), 0.7),
            jitter: 0.1,
        }
    }
}

/// Particle cloud over `(ln a, ln b)` for `R(t) = a (e^(b t) − 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleModel {
    pub ln_a: Vec<f64>,
    pub ln_b: Vec<f64>,
    pub weights: Vec<f64>,
    pub resamples: usize,
}

fn exp_model(ln_a: f64, ln_b: f64, t: f64) -> f64 {
    ln_a.exp() * (ln_b.exp() * t).exp_m1()
}

impl ParticleModel {
    pub fn from_prior<R: Rng + ?Sized>(cfg: &ParticleConfig, rng: &mut R) -> Result<Self> {
        if cfg.particles < 100 {
            return Err(Error::Config(format!("particle filter needs N >= 100, got {}", cfg.particles)));
        }
        let pa = Normal::new(cfg.prior_ln_a.0, cfg.prior_ln_a.1)
            .map_err(|e| Error::Config(format!("prior_ln_a: {e}")))?;
        let pb = Normal::new(cfg.prior_ln_b.0, cfg.prior_ln_b.1)
            .map_err(|e| Error::Config(format!("prior_ln_b: {e}")))?;
        let n = cfg.particles;
        let mut ln_a = Vec::with_capacity(n);
        let mut ln_b = Vec::with_capacity(n);
        for _ in 0..n {
            ln_a.push(pa.sample(rng));
            ln_b.push(pb.sample(rng));
        }
        Ok(ParticleModel {
            ln_a,
            ln_b,
            weights: vec![1.0 / n as f64; n],
            resamples: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Weights the cloud by the likelihood of observing `y` at time `t`,
    /// then resamples if the effective sample size fell below `N/2`.
    pub fn observe<R: Rng + ?Sized>(&mut self, t: usize, y: f64, cfg: &ParticleConfig, rng: &mut R) -> Result<()> {
        let inv_var = 1.0 / (cfg.obs_sigma * cfg.obs_sigma);
        let log_w: Vec<f64> = (0..self.len())
            .map(|i| {
                let r = y - exp_model(self.ln_a[i], self.ln_b[i], t as f64);
                let ll = -0.5 * r * r * inv_var;
                if ll.is_nan() {
                    f64::NEG_INFINITY
                } else {
                    self.weights[i].ln() + ll
                }
            })
            .collect();
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Degeneracy { step: t, ess: 0.0 });
        }
        let mut total = 0.0;
        for (w, lw) in self.weights.iter_mut().zip(&log_w) {
            *w = (lw - max).exp();
            total += *w;
        }
        self.weights.iter_mut().for_each(|w| *w /= total);
        let ess = self.effective_sample_size();
        if ess < 2.0 {
            return Err(Error::Degeneracy { step: t, ess });
        }
        if ess < self.len() as f64 / 2.0 {
            self.resample(cfg.jitter, rng);
        }
        Ok(())
    }

    /// Systematic resampling followed by shrink-and-jitter in log space.
    fn resample<R: Rng + ?Sized>(&mut self, h: f64, rng: &mut R) {
        let n = self.len();
        let u0: f64 = rng.random::<f64>() / n as f64;
        let mut picks = Vec::with_capacity(n);
        let mut cum = self.weights[0];
        let mut j = 0;
        for i in 0..n {
            let u = u0 + i as f64 / n as f64;
            while u > cum && j + 1 < n {
                j += 1;
                cum += self.weights[j];
            }
            picks.push(j);
        }
        // Kernel with the weighted covariance of (ln a, ln b); the two are
        // strongly correlated along the fit ridge.
        let w = &self.weights;
        let mean_a: f64 = self.ln_a.iter().zip(w).map(|(x, w)| x * w).sum();
        let mean_b: f64 = self.ln_b.iter().zip(w).map(|(x, w)| x * w).sum();
        let (mut saa, mut sab, mut sbb) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let (da, db) = (self.ln_a[i] - mean_a, self.ln_b[i] - mean_b);
            saa += w[i] * da * da;
            sab += w[i] * da * db;
            sbb += w[i] * db * db;
        }
        let l11 = saa.sqrt();
        let l21 = if l11 > 0.0 { sab / l11 } else { 0.0 };
        let l22 = (sbb - l21 * l21).max(0.0).sqrt();
        let shrink = (1.0 - h * h).sqrt();
        let mut next_a = Vec::with_capacity(n);
        let mut next_b = Vec::with_capacity(n);
        for &p in &picks {
            let z1: f64 = rng.sample(rand_distr::StandardNormal);
            let z2: f64 = rng.sample(rand_distr::StandardNormal);
            next_a.push(shrink * self.ln_a[p] + (1.0 - shrink) * mean_a + h * l11 * z1);
            next_b.push(shrink * self.ln_b[p] + (1.0 - shrink) * mean_b + h * (l21 * z1 + l22 * z2));
        }
        self.ln_a = next_a;
        self.ln_b = next_b;
        self.weights = vec![1.0 / n as f64; n];
        self.resamples += 1;
    }

    /// Weighted posterior mean of `(a, b)`.
    pub fn posterior_mean(&self) -> (f64, f64) {
        let mut a = 0.0;
        let mut b = 0.0;
        for i in 0..self.len() {
            a += self.weights[i] * self.ln_a[i].exp();
            b += self.weights[i] * self.ln_b[i].exp();
        }
        (a, b)
    }

    /// Weighted mean trajectory at the given times.
    pub fn mean_trajectory(&self, times: impl Iterator<Item = usize>) -> Vec<f64> {
        times
            .map(|t| {
                (0..self.len())
                    .map(|i| self.weights[i] * exp_model(self.ln_a[i], self.ln_b[i], t as f64))
                    .sum()
            })
            .collect()
    }
}

/// Runs the filter over `prefix` (sample `i` at time `i`).
pub fn particle_filter(prefix: &[f64], cfg: &ParticleConfig, seed: u64) -> Result<ParticleModel> {
    if prefix.len() < 5 {
        return Err(Error::TooFewSamples {
            need: 5,
            got: prefix.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ParticleModel::from_prior(cfg, &mut rng)?;
    for (t, &y) in prefix.iter().enumerate() {
        model.observe(t, y, cfg, &mut rng)?;
    }
    Ok(model)
}

/// Filters `prefix` and predicts the `horizon` samples after it.
pub fn particle_predict(prefix: &[f64], horizon: usize, particles: usize, seed: u64) -> Result<Vec<f64>> {
    let cfg = ParticleConfig {
        particles,
        ..ParticleConfig::default()
    };
    let model = particle_filter(prefix, &cfg, seed)?;
    Ok(model.mean_trajectory(prefix.len()..prefix.len() + horizon))
}

/// Per-method predictions over a common scenario set. The first method is
/// the reference for ratios.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodPredictions {
    pub method: String,
    pub scenarios: Vec<DevicePrediction>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub methods: Vec<String>,
    pub scenarios: Vec<String>,
    /// `errors[s][m]`: detection-point error (%) of method `m` on scenario `s`.
    pub errors: Vec<Vec<f64>>,
    /// Mean over scenarios, per method.
    pub aggregate: Vec<f64>,
    /// `aggregate[m] / aggregate[0]`.
    pub ratios: Vec<f64>,
}

/// Scores every method at each scenario's threshold crossing.
pub fn compare(methods: &[MethodPredictions]) -> Result<ComparisonTable> {
    let first = methods
        .first()
        .ok_or_else(|| Error::Config("compare needs at least one method".into()))?;
    let scenarios: Vec<String> = first.scenarios.iter().map(|d| d.device_id.clone()).collect();
    let mut errors = vec![Vec::with_capacity(methods.len()); scenarios.len()];
    for m in methods {
        let ids: Vec<&str> = m.scenarios.iter().map(|d| d.device_id.as_str()).collect();
        if ids != scenarios.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Config(format!("method `{}` covers different scenarios", m.method)));
        }
        for (row, d) in errors.iter_mut().zip(&m.scenarios) {
            row.push(d.detection_error_pct(DETECTION_THRESHOLD)?);
        }
    }
    let aggregate: Vec<f64> = (0..methods.len())
        .map(|j| errors.iter().map(|row| row[j]).sum::<f64>() / scenarios.len().max(1) as f64)
        .collect();
    let ratios = aggregate.iter().map(|a| a / aggregate[0]).collect();
    Ok(ComparisonTable {
        methods: methods.iter().map(|m| m.method.clone()).collect(),
        scenarios,
        errors,
        aggregate,
        ratios,
    })
}

impl ComparisonTable {
    /// Scenarios where the reference method beats every other method.
    pub fn reference_wins(&self) -> usize {
        self.errors
            .iter()
            .filter(|row| row[1..].iter().all(|e| row[0] < *e))
            .count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario");
        for m in &self.methods {
            let _ = write!(out, ",{m}_error_pct");
        }
        for m in &self.methods[1..] {
            let _ = write!(out, ",{m}_ratio");
        }
        out.push('\n');
        let rows = self.errors.iter().zip(&self.scenarios).map(|(r, s)| (s.as_str(), r.as_slice()));
        for (name, row) in rows.chain(std::iter::once(("mean", self.aggregate.as_slice()))) {
            out.push_str(name);
            for e in row {
                let _ = write!(out, ",{}", fmt_sig(*e, 6));
            }
            for e in &row[1..] {
                let _ = write!(out, ",{}", fmt_sig(e / row[0], 6));
            }
            out.push('\n');
        }
        out
    }

    /// Aligned text rendering: one row per method.
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<10}", "method");
        for s in &self.scenarios {
            let _ = write!(out, " {s:>10}");
        }
        let _ = writeln!(out, " {:>10} {:>8}", "mean", "ratio");
        for (j, m) in self.methods.iter().enumerate() {
            let _ = write!(out, "{m:<10}");
            for row in &self.errors {
                let _ = write!(out, " {:>9.3}%", row[j]);
            }
            let _ = writeln!(out, " {:>9.3}% {:>7.3}x", self.aggregate[j], self.ratios[j]);
        }
        out
    }
}

/// How the detection-point comparison is run on a trace set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompareConfig {
    pub train: TrainConfig,
    /// Samples between the end of the observed prefix and the crossing.
    pub lead: usize,
    pub particles: usize,
    pub seed: u64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        let train = TrainConfig::desk_scale();
        CompareConfig {
            lead: train.net.n / 2,
            train,
            particles: 1000,
            seed: 42,
        }
    }
}

/// Leave-one-out comparison: each device in turn is held out, the LSTM is
/// trained on the rest, and all three methods see the same prefix ending
/// `lead` samples before the held-out device's crossing.
pub fn compare_on_traces(traces: &[DeviceTrace], cfg: &CompareConfig) -> Result<ComparisonTable> {
    let horizon = cfg.train.net.n;
    if cfg.lead == 0 || cfg.lead > horizon {
        return Err(Error::Config(format!("lead must be in 1..={horizon}, got {}", cfg.lead)));
    }
    let mut deep = Vec::new();
    let mut kalman = Vec::new();
    let mut particle = Vec::new();
    for (i, trace) in traces.iter().enumerate() {
        let actual = trace.values();
        let t5 = trace.first_crossing(DETECTION_THRESHOLD).ok_or_else(|| Error::MetricUndefined {
            device: trace.device_id.clone(),
            threshold: DETECTION_THRESHOLD,
        })?;
        let need = cfg.train.net.tau.max(5) + cfg.lead;
        if t5 < need {
            return Err(Error::InsufficientData {
                device: trace.device_id.clone(),
                len: t5,
                need,
            });
        }
        let cut = t5 - cfg.lead;
        let prefix = &actual[..cut];
        let run = train_holdout(traces, i, &cfg.train, cfg.seed.wrapping_add(i as u64))?;
        let entry = |predicted: Vec<f64>| DevicePrediction {
            device_id: trace.device_id.clone(),
            actual: actual.clone(),
            predicted,
            offset: cut,
        };
        deep.push(entry(forecast_ohms(&run.outcome.best, &run.normalizer, prefix, horizon)?));
        kalman.push(entry(kalman_predict(prefix, horizon)?));
        particle.push(entry(particle_predict(prefix, horizon, cfg.particles, cfg.seed)?));
    }
    compare(&[
        MethodPredictions {
            method: "deep_race".into(),
            scenarios: deep,
        },
        MethodPredictions {
            method: "kalman".into(),
            scenarios: kalman,
        },
        MethodPredictions {
            method: "particle".into(),
            scenarios: particle,
        },
    ])
}
