//! Device traces: CSV ingestion, synthetic generation, and normalization.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::text::fmt_sig;
use crate::training::Sequence;

/// Header line of the trace CSV format.
pub const CSV_HEADER: &str = "index,delta_r_ohms";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub index: u64,
    /// On-resistance drift in ohms.
    pub delta_r: f64,
}

/// One device's on-resistance drift over time.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceTrace {
    pub device_id: String,
    samples: Vec<Sample>,
}

impl DeviceTrace {
    /// Checks that indices strictly increase and every value is finite and non-negative.
    pub fn new(device_id: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        let device_id = device_id.into();
        for (pos, pair) in samples.windows(2).enumerate() {
            if pair[1].index <= pair[0].index {
                return Err(Error::NonMonotonic {
                    path: device_id,
                    line: pos as u64 + 3,
                    index: pair[1].index,
                });
            }
        }
        if let Some(bad) = samples.iter().find(|s| !(s.delta_r >= 0.0) || !s.delta_r.is_finite()) {
            return Err(Error::Config(format!(
                "device `{device_id}`: invalid delta_r {} at index {}",
                bad.delta_r, bad.index
            )));
        }
        Ok(DeviceTrace { device_id, samples })
    }

    /// Trace with indices `0..values.len()`.
    pub fn from_values(device_id: impl Into<String>, values: &[f64]) -> Result<Self> {
        let samples = values
            .iter()
            .enumerate()
            .map(|(i, &delta_r)| Sample {
                index: i as u64,
                delta_r,
            })
            .collect();
        DeviceTrace::new(device_id, samples)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn values(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.delta_r).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First position whose value reaches `threshold`.
    pub fn first_crossing(&self, threshold: f64) -> Option<usize> {
        self.samples.iter().position(|s| s.delta_r >= threshold)
    }

    /// Leading `len` samples as a new trace with the same id.
    pub fn prefix(&self, len: usize) -> DeviceTrace {
        DeviceTrace {
            device_id: self.device_id.clone(),
            samples: self.samples[..len.min(self.samples.len())].to_vec(),
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<DeviceTrace> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| shown.clone());
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&id, &text, &shown)
}

/// Parses trace CSV text; `origin` is used in error messages.
pub fn parse_csv(device_id: &str, text: &str, origin: &str) -> Result<DeviceTrace> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut records = reader.records();
    match records.next() {
        None => return Err(Error::EmptyTrace(origin.to_string())),
        Some(header) => {
            let header = header.map_err(|e| parse_err(1, e.to_string()))?;
            let got: Vec<&str> = header.iter().collect();
            if got != ["index", "delta_r_ohms"] {
                return Err(parse_err(1, format!("expected header `{CSV_HEADER}`")));
            }
        }
    }
    let mut samples: Vec<Sample> = Vec::new();
    for record in records {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 2 {
            return Err(parse_err(line, format!("expected 2 fields, got {}", record.len())));
        }
        let index: u64 = record[0]
            .parse()
            .map_err(|_| parse_err(line, format!("invalid index `{}`", &record[0])))?;
        let delta_r: f64 = record[1]
            .parse()
            .map_err(|_| parse_err(line, format!("invalid delta_r `{}`", &record[1])))?;
        if !delta_r.is_finite() || delta_r < 0.0 {
            return Err(parse_err(line, format!("delta_r must be finite and non-negative, got {delta_r}")));
        }
        if let Some(prev) = samples.last() {
            if index <= prev.index {
                return Err(Error::NonMonotonic {
                    path: origin.to_string(),
                    line,
                    index,
                });
            }
        }
        samples.push(Sample { index, delta_r });
    }
    if samples.is_empty() {
        return Err(Error::EmptyTrace(origin.to_string()));
    }
    DeviceTrace::new(device_id, samples)
}

/// CSV text with values at 12 significant digits.
pub fn to_csv(trace: &DeviceTrace) -> String {
    let mut out = String::with_capacity(trace.len() * 24);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for s in &trace.samples {
        out.push_str(&s.index.to_string());
        out.push(',');
        out.push_str(&fmt_sig(s.delta_r, 12));
        out.push('\n');
    }
    out
}

pub fn save_csv(trace: &DeviceTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_csv(trace)).map_err(|e| Error::io(path, e))
}

/// Parameters of `ΔR(t) = a·t + b·(e^(c·t) − 1) + noise`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub linear_rate: f64,
    pub exp_scale: f64,
    pub exp_rate: f64,
    pub noise_sigma: f64,
    pub length: usize,
    pub seed: u64,
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("linear_rate", self.linear_rate),
            ("exp_scale", self.exp_scale),
            ("exp_rate", self.exp_rate),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.length == 0 {
            return Err(Error::Config("length must be positive".into()));
        }
        Ok(())
    }

    /// Noise-free drift at sample `t`.
    pub fn mean_at(&self, t: f64) -> f64 {
        self.linear_rate * t + self.exp_scale * (self.exp_rate * t).exp_m1()
    }
}

pub fn synth_degradation(device_id: &str, p: &SynthParams) -> Result<DeviceTrace> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let noise = Normal::new(0.0, p.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let values: Vec<f64> = (0..p.length)
        .map(|t| {
            let eta = if p.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (p.mean_at(t as f64) + eta).max(0.0)
        })
        .collect();
    DeviceTrace::from_values(device_id, &values)
}

/// A named synthetic device.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub id: String,
    pub params: SynthParams,
}

impl Preset {
    pub fn generate(&self) -> Result<DeviceTrace> {
        synth_degradation(&self.id, &self.params)
    }
}

/// The bundled five-device catalogue.
pub const DEFAULT_PRESETS: &str = include_str!("../presets.txt");

/// Parses a preset catalogue: one device per line as whitespace-separated
/// `key=value` tokens (`id`, `linear_rate`, `exp_scale`, `exp_rate`,
/// `noise_sigma`, `length`, `seed`).
pub fn parse_presets(text: &str, origin: &str) -> Result<Vec<Preset>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.to_string(),
            line: idx as u64 + 1,
            msg,
        };
        let mut id = None;
        let mut p = SynthParams {
            linear_rate: f64::NAN,
            exp_scale: f64::NAN,
            exp_rate: f64::NAN,
            noise_sigma: f64::NAN,
            length: 0,
            seed: 0,
        };
        let mut seen = 0u8;
        for token in line.split_whitespace() {
            let (key, value) = token
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got `{token}`")))?;
            let num = || value.parse::<f64>().map_err(|_| err(format!("invalid number for {key}: `{value}`")));
            let int = || value.parse::<u64>().map_err(|_| err(format!("invalid integer for {key}: `{value}`")));
            match key {
                "id" => id = Some(value.to_string()),
                "linear_rate" => p.linear_rate = num()?,
                "exp_scale" => p.exp_scale = num()?,
                "exp_rate" => p.exp_rate = num()?,
                "noise_sigma" => p.noise_sigma = num()?,
                "length" => p.length = int()? as usize,
                "seed" => p.seed = int()?,
                other => return Err(err(format!("unknown preset key `{other}`"))),
            }
            seen += 1;
        }
        let id = id.ok_or_else(|| err("preset is missing `id`".into()))?;
        if seen != 7 {
            return Err(err(format!("preset `{id}` must set all 7 keys")));
        }
        p.validate().map_err(|e| err(e.to_string()))?;
        out.push(Preset { id, params: p });
    }
    Ok(out)
}

pub fn default_presets() -> Vec<Preset> {
    parse_presets(DEFAULT_PRESETS, "presets.txt").expect("bundled presets are valid")
}

/// Affine map from `[r_min, r_max]` ohms onto `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizer {
    pub r_min: f64,
    pub r_max: f64,
}

/// Normalized values plus whether any fell outside `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub values: Vec<f64>,
    pub extrapolated: bool,
}

impl Normalizer {
    pub fn new(r_min: f64, r_max: f64) -> Result<Self> {
        if !(r_max > r_min) || !r_min.is_finite() || !r_max.is_finite() {
            return Err(Error::DegenerateRange(r_min));
        }
        Ok(Normalizer { r_min, r_max })
    }

    /// Range over the union of `traces`.
    pub fn fit<'a>(traces: impl IntoIterator<Item = &'a DeviceTrace>) -> Result<Self> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for t in traces {
            for s in t.samples() {
                lo = lo.min(s.delta_r);
                hi = hi.max(s.delta_r);
            }
        }
        if !lo.is_finite() {
            return Err(Error::EmptyTrace("normalizer input".into()));
        }
        Normalizer::new(lo, hi)
    }

    pub fn normalize_value(&self, ohms: f64) -> f64 {
        2.0 * (ohms - self.r_min) / (self.r_max - self.r_min) - 1.0
    }

    pub fn denormalize_value(&self, x: f64) -> f64 {
        (x + 1.0) * 0.5 * (self.r_max - self.r_min) + self.r_min
    }

    pub fn normalize(&self, values: &[f64]) -> Normalized {
        let values: Vec<f64> = values.iter().map(|&v| self.normalize_value(v)).collect();
        let extrapolated = values.iter().any(|v| !(-1.0..=1.0).contains(v));
        Normalized { values, extrapolated }
    }

    pub fn denormalize(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.denormalize_value(v)).collect()
    }

    /// Normalized `k = 1` training sequence for `trace`.
    pub fn sequence(&self, trace: &DeviceTrace) -> Sequence {
        Sequence::from_scalars(trace.device_id.clone(), &self.normalize(&trace.values()).values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(noise: f64) -> SynthParams {
        SynthParams {
            linear_rate: 1e-5,
            exp_scale: 1e-4,
            exp_rate: 0.01,
            noise_sigma: noise,
            length: 200,
            seed: 7,
        }
    }

    #[test]
    fn synth_closed_form() {
        let t = synth_degradation("d", &params(0.0)).unwrap();
        assert_eq!(t.samples()[0].delta_r, 0.0);
        let expect = 1e-3 + 1e-4 * (std::f64::consts::E - 1.0);
        assert!((t.samples()[100].delta_r - expect).abs() < 1e-15);
        assert!((expect - 1.1718e-3).abs() < 1e-7);
    }

    #[test]
    fn synth_is_seeded() {
        let a = synth_degradation("d", &params(1e-4)).unwrap();
        assert_eq!(a, synth_degradation("d", &params(1e-4)).unwrap());
        let mut other = params(1e-4);
        other.seed = 8;
        assert_ne!(a, synth_degradation("d", &other).unwrap());
        assert!(a.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn noiseless_synth_is_convex_and_non_decreasing() {
        let v = synth_degradation("d", &params(0.0)).unwrap().values();
        for w in v.windows(3) {
            assert!(w[1] >= w[0]);
            assert!(w[2] - 2.0 * w[1] + w[0] >= -1e-15);
        }
    }

    #[test]
    fn csv_errors() {
        let err = parse_csv("d", "index,delta_r_ohms\n1,0.1\n2,0.2\n3,abc\n", "f.csv").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
        assert!(matches!(parse_csv("d", "", "f.csv"), Err(Error::EmptyTrace(_))));
        assert!(matches!(parse_csv("d", "index,delta_r_ohms\n", "f.csv"), Err(Error::EmptyTrace(_))));
        let err = parse_csv("d", "index,delta_r_ohms\n1,0.1\n1,0.2\n", "f.csv").unwrap_err();
        assert!(matches!(err, Error::NonMonotonic { line: 3, index: 1, .. }), "{err}");
        assert!(parse_csv("d", "idx,r\n1,0.1\n", "f.csv").is_err());
        assert!(parse_csv("d", "index,delta_r_ohms\n1,-0.1\n", "f.csv").is_err());
        assert!(parse_csv("d", "index,delta_r_ohms\n1,0.1,4\n", "f.csv").is_err());
    }

    #[test]
    fn csv_round_trip_through_text() {
        let t = synth_degradation("d", &params(2e-4)).unwrap();
        let text = to_csv(&t);
        let back = parse_csv("d", &text, "mem").unwrap();
        assert_eq!(to_csv(&back), text);
        for (a, b) in t.samples().iter().zip(back.samples()) {
            assert_eq!(a.index, b.index);
            assert!((a.delta_r - b.delta_r).abs() <= a.delta_r.abs() * 1e-11);
        }
    }

    #[test]
    fn bundled_presets_cross_the_detection_threshold() {
        let presets = default_presets();
        assert_eq!(presets.len(), 5);
        let mut seeds: Vec<u64> = presets.iter().map(|p| p.params.seed).collect();
        seeds.dedup();
        assert_eq!(seeds.len(), 5);
        for p in &presets {
            let trace = p.generate().unwrap();
            let t5 = trace.first_crossing(0.05).expect("crosses 0.05");
            assert!(t5 < p.params.length);
            assert!(trace.len() >= crate::network::NetConfig::default().window());
        }
    }

    #[test]
    fn preset_parse_errors() {
        assert!(parse_presets("id=a linear_rate=1\n", "p").is_err());
        assert!(parse_presets("id=a linear_rate=x exp_scale=1 exp_rate=1 noise_sigma=0 length=5 seed=1", "p").is_err());
        assert!(parse_presets("id=a linear_rate=-1 exp_scale=1 exp_rate=1 noise_sigma=0 length=5 seed=1", "p").is_err());
    }

    #[test]
    fn normalizer_examples() {
        let nz = Normalizer::new(0.0, 0.05).unwrap();
        assert_eq!(nz.normalize_value(0.025), 0.0);
        let n = nz.normalize(&[0.06]);
        assert!(n.extrapolated && n.values[0] > 1.0);
        assert!(!nz.normalize(&[0.0, 0.05]).extrapolated);
        let flat = DeviceTrace::from_values("c", &[0.01; 5]).unwrap();
        assert!(matches!(Normalizer::fit([&flat]), Err(Error::DegenerateRange(_))));
    }

    proptest! {
        #[test]
        fn normalize_round_trip(lo in 0.0f64..0.1, span in 1e-4f64..1.0, x in 0.0f64..2.0) {
            let nz = Normalizer::new(lo, lo + span).unwrap();
            prop_assert!((nz.denormalize_value(nz.normalize_value(x)) - x).abs() < 1e-12);
        }

        #[test]
        fn normalize_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let nz = Normalizer::new(0.0, 0.07).unwrap();
            if a < b {
                prop_assert!(nz.normalize_value(a) < nz.normalize_value(b));
            }
        }
    }
}
