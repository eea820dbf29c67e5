//! Edge/cloud simulation: model snapshots on the wire, edge-side inference
//! with threshold-triggered retraining, and a deterministic event loop.
//!
//! # Snapshot byte layout
//!
//! All integers and floats are little-endian.
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0 | 4 | magic `DRCE` |
//! | 4 | 2 | format version (`u16`, currently 1) |
//! | 6 | 8 | model version (`u64`) |
//! | 14 | 20 | `k, tau, n, hidden, ell` (`u32` each) |
//! | 34 | 1 | `learn_initial_state` (0 or 1) |
//! | 35 | 16 | normalizer `r_min, r_max` (`f64`) |
//! | 51 | 8 | parameter count `P` (`u64`) |
//! | 59 | 8·P | parameters (`f64`, [`StackedLstm::to_flat`] order) |
//! | 59+8P | 4 | CRC-32 of every preceding byte |

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::apply_train_key;
use crate::data::{default_presets, load_csv, DeviceTrace, Normalizer, Sample};
use crate::error::{Error, Result};
use crate::metrics::ErrorReport;
use crate::network::{NetConfig, StackedLstm};
use crate::text::{fmt_sig, parse_kv, parse_value};
use crate::training::{evaluate_windows, forecast_ohms, train, train_from, Sequence, TrainConfig};

pub const MAGIC: [u8; 4] = *b"DRCE";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 59;
const CRC_LEN: usize = 4;

/// Versioned, self-describing network parameters plus the normalizer they
/// were trained with.
#[derive(Clone, Debug)]
pub struct ModelSnapshot {
    pub version: u64,
    pub config: NetConfig,
    pub normalizer: Normalizer,
    pub params: Vec<f64>,
}

impl ModelSnapshot {
    pub fn from_network(version: u64, net: &StackedLstm, normalizer: Normalizer) -> Self {
        ModelSnapshot {
            version,
            config: *net.config(),
            normalizer,
            params: net.to_flat(),
        }
    }

    pub fn network(&self) -> Result<StackedLstm> {
        let mut net = StackedLstm::zeros(self.config)?;
        net.set_flat(&self.params)?;
        Ok(net)
    }

    /// Equality down to the bit pattern of every float.
    pub fn bit_eq(&self, other: &ModelSnapshot) -> bool {
        self.version == other.version
            && self.config == other.config
            && self.normalizer.r_min.to_bits() == other.normalizer.r_min.to_bits()
            && self.normalizer.r_max.to_bits() == other.normalizer.r_max.to_bits()
            && self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn encode(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.params.len() + CRC_LEN);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.version.to_le_bytes());
        for v in [c.k, c.tau, c.n, c.hidden, c.ell] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(u8::from(c.learn_initial_state));
        out.extend_from_slice(&self.normalizer.r_min.to_le_bytes());
        out.extend_from_slice(&self.normalizer.r_max.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses and verifies `bytes`. With `expected`, the stored network shape
    /// must equal it.
    pub fn decode(bytes: &[u8], expected: Option<&NetConfig>) -> Result<Self> {
        if bytes.len() < HEADER_LEN + CRC_LEN {
            return Err(Error::Malformed(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let body = &bytes[..bytes.len() - CRC_LEN];
        let stored = u32::from_le_bytes(bytes[bytes.len() - CRC_LEN..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let format = u16_at(4);
        if format != FORMAT_VERSION {
            return Err(Error::FormatVersion(format));
        }
        let learn_initial_state = match bytes[34] {
            0 => false,
            1 => true,
            b => return Err(Error::Malformed(format!("initial-state flag {b}"))),
        };
        let config = NetConfig {
            k: u32_at(14),
            tau: u32_at(18),
            n: u32_at(22),
            hidden: u32_at(26),
            ell: u32_at(30),
            learn_initial_state,
        };
        config.validate().map_err(|e| Error::Malformed(e.to_string()))?;
        let count = u64_at(51);
        let want = config
            .param_count()
            .ok_or_else(|| Error::Malformed("stored shape is too large".into()))?;
        if count != want as u64 || (body.len() - HEADER_LEN) / 8 != want || !(body.len() - HEADER_LEN).is_multiple_of(8) {
            return Err(Error::Malformed(format!(
                "{count} parameters stored, {want} expected for the stored shape"
            )));
        }
        if let Some(exp) = expected {
            if *exp != config {
                return Err(Error::ConfigMismatch(format!("stored {config:?}, expected {exp:?}")));
            }
        }
        let normalizer =
            Normalizer::new(f64_at(35), f64_at(43)).map_err(|e| Error::Malformed(format!("normalizer: {e}")))?;
        let params = (0..want).map(|i| f64_at(HEADER_LEN + 8 * i)).collect();
        Ok(ModelSnapshot {
            version: u64_at(6),
            config,
            normalizer,
            params,
        })
    }
}

pub fn encode_model(m: &ModelSnapshot) -> Vec<u8> {
    m.encode()
}

pub fn decode_model(bytes: &[u8], expected: Option<&NetConfig>) -> Result<ModelSnapshot> {
    ModelSnapshot::decode(bytes, expected)
}

/// Anything that can forecast a device's next samples on the edge.
pub trait Forecaster {
    fn version(&self) -> u64;
    /// Samples needed before the first forecast.
    fn context(&self) -> usize;
    /// Forecasts indices `next_index..next_index + horizon` from the most
    /// recent samples (`recent`, oldest first, ohms).
    fn forecast(&self, recent: &[f64], next_index: usize, horizon: usize) -> Result<Vec<f64>>;
}

/// The LSTM forecaster carried by a snapshot.
#[derive(Clone, Debug)]
pub struct LstmForecaster {
    snapshot: ModelSnapshot,
    net: StackedLstm,
}

impl LstmForecaster {
    pub fn new(snapshot: ModelSnapshot) -> Result<Self> {
        let net = snapshot.network()?;
        Ok(LstmForecaster { snapshot, net })
    }

    pub fn snapshot(&self) -> &ModelSnapshot {
        &self.snapshot
    }
}

impl Forecaster for LstmForecaster {
    fn version(&self) -> u64 {
        self.snapshot.version
    }

    fn context(&self) -> usize {
        self.snapshot.config.tau
    }

    fn forecast(&self, recent: &[f64], _next_index: usize, horizon: usize) -> Result<Vec<f64>> {
        forecast_ohms(&self.net, &self.snapshot.normalizer, recent, horizon)
    }
}

/// A matured prediction checked against the sensed value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Comparison {
    pub index: usize,
    pub issued_at: usize,
    pub version: u64,
    pub actual: f64,
    pub predicted: f64,
}

impl Comparison {
    pub fn error(&self) -> f64 {
        self.actual - self.predicted
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrainRequest {
    pub node_id: String,
    /// Sample index whose comparison crossed the threshold.
    pub index: usize,
    pub error: f64,
    pub version: u64,
}

/// What one sample produced on the edge.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EdgeOutput {
    pub prediction: Option<Vec<f64>>,
    pub matured: Vec<Comparison>,
    pub request: Option<RetrainRequest>,
}

#[derive(Clone, Copy, Debug)]
struct OpenPrediction {
    issued_at: usize,
    version: u64,
    value: f64,
}

/// Edge device: buffers samples, forecasts, and asks for retraining when a
/// matured prediction misses by more than `delta_r_t` ohms.
pub struct EdgeNode {
    pub node_id: String,
    model: Option<Box<dyn Forecaster>>,
    buffer: VecDeque<f64>,
    pub delta_r_t: f64,
    pub horizon: usize,
    pending_upload: Vec<Sample>,
    outstanding_request: bool,
    next_index: usize,
    open: BTreeMap<usize, Vec<OpenPrediction>>,
}

impl EdgeNode {
    pub fn new(node_id: impl Into<String>, delta_r_t: f64, horizon: usize) -> Self {
        EdgeNode {
            node_id: node_id.into(),
            model: None,
            buffer: VecDeque::new(),
            delta_r_t,
            horizon,
            pending_upload: Vec::new(),
            outstanding_request: false,
            next_index: 0,
            open: BTreeMap::new(),
        }
    }

    pub fn model_version(&self) -> Option<u64> {
        self.model.as_ref().map(|m| m.version())
    }

    pub fn has_outstanding_request(&self) -> bool {
        self.outstanding_request
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn pending_uploads(&self) -> usize {
        self.pending_upload.len()
    }

    /// Installs `model` if it is newer than the current one. Any newer model
    /// answers the outstanding request.
    pub fn install(&mut self, model: Box<dyn Forecaster>) -> bool {
        if self.model_version().is_some_and(|v| v >= model.version()) {
            return false;
        }
        self.model = Some(model);
        self.outstanding_request = false;
        true
    }

    pub fn take_upload(&mut self) -> Vec<Sample> {
        std::mem::take(&mut self.pending_upload)
    }

    /// Ingests the next sensed value.
    pub fn edge_step(&mut self, value: f64) -> Result<EdgeOutput> {
        let index = self.next_index;
        self.next_index += 1;
        self.pending_upload.push(Sample {
            index: index as u64,
            delta_r: value,
        });
        let mut out = EdgeOutput::default();
        if let Some(open) = self.open.remove(&index) {
            for p in open {
                out.matured.push(Comparison {
                    index,
                    issued_at: p.issued_at,
                    version: p.version,
                    actual: value,
                    predicted: p.value,
                });
            }
        }
        if !self.outstanding_request {
            if let Some(c) = out.matured.iter().find(|c| !(c.error().abs() <= self.delta_r_t)) {
                out.request = Some(RetrainRequest {
                    node_id: self.node_id.clone(),
                    index,
                    error: c.error(),
                    version: c.version,
                });
                self.outstanding_request = true;
            }
        }
        let Some(model) = &self.model else {
            self.buffer.push_back(value);
            return Ok(out);
        };
        let context = model.context().max(1);
        self.buffer.push_back(value);
        while self.buffer.len() > context {
            self.buffer.pop_front();
        }
        if self.buffer.len() >= context && self.horizon > 0 {
            let recent: Vec<f64> = self.buffer.iter().copied().collect();
            let pred = model.forecast(&recent, index + 1, self.horizon)?;
            let version = model.version();
            for (h, &v) in pred.iter().enumerate() {
                self.open.entry(index + 1 + h).or_default().push(OpenPrediction {
                    issued_at: index,
                    version,
                    value: v,
                });
            }
            out.prediction = Some(pred);
        }
        Ok(out)
    }
}

/// Cloud side: device trace registry and per-scenario model registry.
#[derive(Clone, Debug, Default)]
pub struct CloudNode {
    traces: BTreeMap<String, Vec<f64>>,
    models: BTreeMap<String, ModelSnapshot>,
    queue: VecDeque<RetrainRequest>,
}

impl CloudNode {
    pub fn register_trace(&mut self, id: &str, values: Vec<f64>) {
        self.traces.insert(id.to_string(), values);
    }

    pub fn append_samples(&mut self, id: &str, samples: &[Sample]) {
        self.traces
            .entry(id.to_string())
            .or_default()
            .extend(samples.iter().map(|s| s.delta_r));
    }

    pub fn trace(&self, id: &str) -> Option<&[f64]> {
        self.traces.get(id).map(Vec::as_slice)
    }

    pub fn latest(&self, scenario: &str) -> Option<&ModelSnapshot> {
        self.models.get(scenario)
    }

    /// Stores `snapshot` as the scenario's newest model; versions must grow.
    pub fn publish(&mut self, scenario: &str, snapshot: ModelSnapshot) -> Result<()> {
        if let Some(cur) = self.models.get(scenario) {
            if snapshot.version <= cur.version {
                return Err(Error::Config(format!(
                    "model version {} does not follow {}",
                    snapshot.version, cur.version
                )));
            }
        }
        self.models.insert(scenario.to_string(), snapshot);
        Ok(())
    }

    pub fn enqueue(&mut self, req: RetrainRequest) {
        self.queue.push_back(req);
    }

    pub fn next_job(&mut self) -> Option<RetrainRequest> {
        self.queue.pop_front()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    Sample,
    Upload,
    RetrainRequest,
    ModelPush,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::Sample => "sample",
            EventKind::Upload => "upload",
            EventKind::RetrainRequest => "retrain_request",
            EventKind::ModelPush => "model_push",
        }
    }
}

#[derive(Clone, Debug)]
enum Payload {
    Sample { value: f64 },
    Upload { samples: Vec<Sample> },
    RetrainRequest(RetrainRequest),
    ModelPush { bytes: Vec<u8> },
}

impl Payload {
    fn kind(&self) -> EventKind {
        match self {
            Payload::Sample { .. } => EventKind::Sample,
            Payload::Upload { .. } => EventKind::Upload,
            Payload::RetrainRequest(_) => EventKind::RetrainRequest,
            Payload::ModelPush { .. } => EventKind::ModelPush,
        }
    }
}

/// Events ordered by `(tick, insertion)`.
#[derive(Debug, Default)]
struct EventQueue {
    events: BTreeMap<(u64, u64), Payload>,
    next_seq: u64,
}

impl EventQueue {
    fn push(&mut self, tick: u64, payload: Payload) {
        self.events.insert((tick, self.next_seq), payload);
        self.next_seq += 1;
    }

    fn pop(&mut self) -> Option<((u64, u64), Payload)> {
        self.events.pop_first()
    }
}

/// One processed event.
#[derive(Clone, Debug, PartialEq)]
pub struct EventRecord {
    pub tick: u64,
    pub seq: u64,
    pub kind: EventKind,
    /// Edge model version after the event.
    pub version: u64,
    pub detail: String,
}

/// What one scenario file describes.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub name: String,
    /// Preset ids or CSV paths; empty means every bundled preset.
    pub devices: Vec<String>,
    pub holdout: String,
    /// Edge retrain threshold in ohms.
    pub delta_r_t: f64,
    /// Edge forecast length; `None` means `n`.
    pub horizon: Option<usize>,
    pub retrain_budget: usize,
    /// Ticks between a retrain request and the resulting model push.
    pub retrain_latency: u64,
    /// Edge uploads once this many samples are pending.
    pub upload_every: usize,
    /// Learning-rate multiplier for warm-start retraining.
    pub retrain_lr_scale: f64,
    /// Samples streamed from the held-out trace; `None` streams all of it.
    pub samples: Option<usize>,
    pub train: TrainConfig,
}

impl ScenarioSpec {
    /// Desk-scale training, presets, every sample streamed.
    pub fn new(name: impl Into<String>, holdout: impl Into<String>) -> Self {
        ScenarioSpec {
            name: name.into(),
            devices: Vec::new(),
            holdout: holdout.into(),
            delta_r_t: 0.005,
            horizon: None,
            retrain_budget: 3,
            retrain_latency: 10,
            upload_every: 25,
            retrain_lr_scale: 0.1,
            samples: None,
            train: TrainConfig::desk_scale(),
        }
    }

    /// Parses `key=value` lines. Training keys take a `train.` prefix.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let map = parse_kv(text, origin)?;
        let holdout = map
            .get("holdout")
            .ok_or_else(|| Error::Config(format!("{origin}: scenario needs `holdout`")))?;
        let mut spec = ScenarioSpec::new(map.get("name").map_or("scenario", String::as_str), holdout.as_str());
        for (k, v) in &map {
            match k.as_str() {
                "name" | "holdout" => {}
                "devices" => {
                    spec.devices = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect()
                }
                "delta_r_t" => spec.delta_r_t = parse_value(k, v)?,
                "horizon" => spec.horizon = Some(parse_value(k, v)?),
                "retrain_budget" => spec.retrain_budget = parse_value(k, v)?,
                "retrain_latency" => spec.retrain_latency = parse_value(k, v)?,
                "upload_every" => spec.upload_every = parse_value(k, v)?,
                "retrain_lr_scale" => spec.retrain_lr_scale = parse_value(k, v)?,
                "samples" => {
                    spec.samples = match v.as_str() {
                        "all" => None,
                        n => Some(parse_value(k, n)?),
                    }
                }
                other => {
                    let known = match other.strip_prefix("train.") {
                        Some(key) => apply_train_key(&mut spec.train, key, v)?,
                        None => false,
                    };
                    if !known {
                        return Err(Error::Config(format!("{origin}: unknown scenario key `{other}`")));
                    }
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.delta_r_t.is_nan() || self.delta_r_t < 0.0 {
            return Err(Error::Config("delta_r_t must be non-negative".into()));
        }
        if self.upload_every == 0 {
            return Err(Error::Config("upload_every must be positive".into()));
        }
        if !(self.retrain_lr_scale > 0.0) {
            return Err(Error::Config("retrain_lr_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.horizon.unwrap_or(self.train.net.n)
    }

    /// Resolves device entries: preset ids first, otherwise CSV paths
    /// relative to `base`.
    pub fn load_devices(&self, base: &Path) -> Result<Vec<DeviceTrace>> {
        let presets = default_presets();
        if self.devices.is_empty() {
            return presets.iter().map(|p| p.generate()).collect();
        }
        self.devices
            .iter()
            .map(|d| match presets.iter().find(|p| p.id == *d) {
                Some(p) => p.generate(),
                None => load_csv(base.join(d)),
            })
            .collect()
    }
}

/// Error summary of the predictions made by one model version.
#[derive(Clone, Debug, PartialEq)]
pub struct VersionReport {
    pub version: u64,
    pub comparisons: usize,
    pub report: Option<ErrorReport>,
}

/// Outcome of one simulated scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct SimReport {
    pub scenario: String,
    pub seed: u64,
    pub holdout: String,
    pub events: Vec<EventRecord>,
    pub samples_streamed: usize,
    pub predictions: usize,
    pub comparisons: usize,
    pub retrain_requests: usize,
    pub retrains: usize,
    pub retrains_denied: usize,
    pub messages: BTreeMap<&'static str, usize>,
    pub versions: Vec<VersionReport>,
    /// Normalized MSE over every matured comparison.
    pub heldout_mse: Option<f64>,
    pub final_version: u64,
}

impl SimReport {
    pub fn events_csv(&self) -> String {
        let mut out = String::from("tick,seq,kind,version,detail\n");
        for e in &self.events {
            let _ = writeln!(out, "{},{},{},{},{}", e.tick, e.seq, e.kind.name(), e.version, e.detail);
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("scenario", self.scenario.clone());
        put("seed", self.seed.to_string());
        put("holdout", self.holdout.clone());
        put("samples_streamed", self.samples_streamed.to_string());
        put("predictions", self.predictions.to_string());
        put("comparisons", self.comparisons.to_string());
        put("retrain_requests", self.retrain_requests.to_string());
        put("retrains", self.retrains.to_string());
        put("retrains_denied", self.retrains_denied.to_string());
        put("final_version", self.final_version.to_string());
        for (k, v) in &self.messages {
            put(&format!("messages.{k}"), v.to_string());
        }
        put(
            "heldout_mse_normalized",
            self.heldout_mse.map_or_else(|| "none".into(), |m| fmt_sig(m, 6)),
        );
        for v in &self.versions {
            put(&format!("v{}.comparisons", v.version), v.comparisons.to_string());
            if let Some(r) = &v.report {
                for (k, val) in r.to_kv(&format!("v{}.", v.version)).lines().filter_map(|l| l.split_once('=')) {
                    put(k, val.to_string());
                }
            }
        }
        out
    }
}

struct Simulation<'a> {
    spec: &'a ScenarioSpec,
    seed: u64,
    normalizer: Normalizer,
    training: Vec<Sequence>,
    validation: Sequence,
    cloud: CloudNode,
    edge: EdgeNode,
    queue: EventQueue,
    report: SimReport,
    comparisons: Vec<Comparison>,
}

impl Simulation<'_> {
    fn send(&mut self, tick: u64, payload: Payload) {
        *self.report.messages.entry(payload.kind().name()).or_default() += 1;
        self.queue.push(tick, payload);
    }

    fn log(&mut self, (tick, seq): (u64, u64), kind: EventKind, detail: String) {
        self.report.events.push(EventRecord {
            tick,
            seq,
            kind,
            version: self.edge.model_version().unwrap_or(0),
            detail,
        });
    }

    fn flush_upload(&mut self, tick: u64) {
        let samples = self.edge.take_upload();
        if !samples.is_empty() {
            self.send(tick, Payload::Upload { samples });
        }
    }

    fn retrain(&mut self, tick: u64) -> Result<()> {
        let current = self
            .cloud
            .latest(&self.spec.name)
            .ok_or_else(|| Error::Config("no model to retrain".into()))?
            .clone();
        let net = current.network()?;
        let uploaded = self.cloud.trace(&self.spec.holdout).unwrap_or(&[]);
        let mut cfg = self.spec.train;
        cfg.it_max = (cfg.it_max / 4).max(1);
        cfg.adam.lr *= self.spec.retrain_lr_scale;
        let retrain_seed = self.seed ^ (0x5eed_0000 + self.report.retrains as u64 + 1);
        let outcome = if uploaded.len() >= cfg.net.window() {
            let test = Sequence::from_scalars(
                self.spec.holdout.clone(),
                &self.normalizer.normalize(uploaded).values,
            );
            let mut all = self.training.clone();
            all.push(self.validation.clone());
            cfg.m = cfg.m.min(all.len());
            train_from(net, &all, &test, &cfg, retrain_seed)?
        } else {
            cfg.m = cfg.m.min(self.training.len());
            train_from(net, &self.training, &self.validation, &cfg, retrain_seed)?
        };
        let snapshot = ModelSnapshot::from_network(current.version + 1, &outcome.best, self.normalizer);
        let bytes = snapshot.encode();
        self.cloud.publish(&self.spec.name, snapshot)?;
        self.report.retrains += 1;
        self.send(tick + self.spec.retrain_latency, Payload::ModelPush { bytes });
        Ok(())
    }

    fn handle(&mut self, key: (u64, u64), payload: Payload) -> Result<()> {
        let tick = key.0;
        match payload {
            Payload::Sample { value } => {
                let out = self.edge.edge_step(value)?;
                self.report.samples_streamed += 1;
                if out.prediction.is_some() {
                    self.report.predictions += 1;
                }
                let worst = out.matured.iter().map(|c| c.error().abs()).fold(0.0, f64::max);
                self.comparisons.extend_from_slice(&out.matured);
                self.log(
                    key,
                    EventKind::Sample,
                    format!(
                        "index={} value={} matured={} max_abs_error={}",
                        tick,
                        fmt_sig(value, 8),
                        out.matured.len(),
                        fmt_sig(worst, 6)
                    ),
                );
                if let Some(req) = out.request {
                    self.flush_upload(tick);
                    self.report.retrain_requests += 1;
                    self.send(tick, Payload::RetrainRequest(req));
                } else if self.edge.pending_uploads() >= self.spec.upload_every {
                    self.flush_upload(tick);
                }
            }
            Payload::Upload { samples } => {
                self.cloud.append_samples(&self.spec.holdout, &samples);
                let first = samples.first().map_or(0, |s| s.index);
                self.log(key, EventKind::Upload, format!("samples={} first_index={first}", samples.len()));
            }
            Payload::RetrainRequest(req) => {
                let detail = format!(
                    "index={} error={} threshold={} model={}",
                    req.index,
                    fmt_sig(req.error, 6),
                    fmt_sig(self.spec.delta_r_t, 6),
                    req.version
                );
                self.cloud.enqueue(req);
                if self.report.retrains < self.spec.retrain_budget {
                    self.log(key, EventKind::RetrainRequest, format!("{detail} accepted"));
                    while self.cloud.next_job().is_some() {
                        self.retrain(tick)?;
                    }
                } else {
                    self.cloud.next_job();
                    self.report.retrains_denied += 1;
                    self.log(key, EventKind::RetrainRequest, format!("{detail} denied"));
                }
            }
            Payload::ModelPush { bytes } => {
                let snapshot = ModelSnapshot::decode(&bytes, Some(&self.spec.train.net))?;
                let version = snapshot.version;
                let installed = self.edge.install(Box::new(LstmForecaster::new(snapshot)?));
                self.log(
                    key,
                    EventKind::ModelPush,
                    format!("pushed={version} bytes={} installed={installed}", bytes.len()),
                );
            }
        }
        Ok(())
    }

    fn finish(mut self) -> SimReport {
        let scale = 2.0 / (self.normalizer.r_max - self.normalizer.r_min);
        self.report.comparisons = self.comparisons.len();
        if !self.comparisons.is_empty() {
            let total: f64 = self.comparisons.iter().map(|c| (c.error() * scale).powi(2)).sum();
            self.report.heldout_mse = Some(total / self.comparisons.len() as f64);
        }
        let mut by_version: BTreeMap<u64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for c in &self.comparisons {
            let e = by_version.entry(c.version).or_default();
            e.0.push(c.actual);
            e.1.push(c.predicted);
        }
        for (version, (actual, predicted)) in by_version {
            self.report.versions.push(VersionReport {
                version,
                comparisons: actual.len(),
                report: ErrorReport::new(&actual, &predicted, Some(&self.normalizer), None).ok(),
            });
        }
        self.report.final_version = self.edge.model_version().unwrap_or(0);
        self.report
    }
}

/// Loads the spec's devices relative to the working directory and runs it.
pub fn run_scenario(spec: &ScenarioSpec, seed: u64) -> Result<SimReport> {
    let traces = spec.load_devices(Path::new("."))?;
    run_scenario_with(spec, &traces, seed)
}

/// Runs the event loop over `traces`.
///
/// The cloud first trains on every device except the held-out one, using the
/// last of them as the test device, and pushes version 1. The held-out
/// device then streams one sample per tick. Retraining warm-starts from the
/// current model for a quarter of `it_max` at `retrain_lr_scale` times the
/// learning rate, tested on the held-out device's
/// uploaded samples once they cover a full window.
pub fn run_scenario_with(spec: &ScenarioSpec, traces: &[DeviceTrace], seed: u64) -> Result<SimReport> {
    spec.validate()?;
    let hold = traces
        .iter()
        .position(|t| t.device_id == spec.holdout)
        .ok_or_else(|| Error::Config(format!("holdout `{}` is not among the scenario devices", spec.holdout)))?;
    let others: Vec<&DeviceTrace> = traces.iter().enumerate().filter(|(i, _)| *i != hold).map(|(_, t)| t).collect();
    if others.len() < 2 {
        return Err(Error::Config(
            "a scenario needs at least two devices besides the held-out one".into(),
        ));
    }
    let normalizer = Normalizer::fit(others.iter().copied())?;
    let mut seqs: Vec<Sequence> = others.iter().map(|t| normalizer.sequence(t)).collect();
    let validation = seqs.pop().expect("at least two devices");
    let mut cfg = spec.train;
    cfg.m = cfg.m.min(seqs.len());
    let initial = train(&seqs, &validation, &cfg, seed)?;

    let mut cloud = CloudNode::default();
    for t in &others {
        cloud.register_trace(&t.device_id, t.values());
    }
    let v1 = ModelSnapshot::from_network(1, &initial.best, normalizer);
    let v1_bytes = v1.encode();
    cloud.publish(&spec.name, v1)?;

    let mut sim = Simulation {
        spec,
        seed,
        normalizer,
        training: seqs,
        validation,
        cloud,
        edge: EdgeNode::new(spec.holdout.clone(), spec.delta_r_t, spec.horizon()),
        queue: EventQueue::default(),
        report: SimReport {
            scenario: spec.name.clone(),
            seed,
            holdout: spec.holdout.clone(),
            events: Vec::new(),
            samples_streamed: 0,
            predictions: 0,
            comparisons: 0,
            retrain_requests: 0,
            retrains: 0,
            retrains_denied: 0,
            messages: BTreeMap::new(),
            versions: Vec::new(),
            heldout_mse: None,
            final_version: 0,
        },
        comparisons: Vec::new(),
    };
    sim.send(0, Payload::ModelPush { bytes: v1_bytes });
    let values = traces[hold].values();
    let streamed = spec.samples.unwrap_or(values.len()).min(values.len());
    for (i, &value) in values[..streamed].iter().enumerate() {
        sim.send(i as u64, Payload::Sample { value });
    }
    while let Some((key, payload)) = sim.queue.pop() {
        sim.handle(key, payload)?;
    }
    Ok(sim.finish())
}

/// Mean held-out MSE for one batch size.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationPoint {
    pub m: usize,
    pub mean_mse: f64,
    pub trial_mse: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationCurve {
    pub holdout: String,
    pub points: Vec<AggregationPoint>,
    /// Mean MSE strictly decreases as `m` grows.
    pub monotone: bool,
}

impl AggregationCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("m,mean_mse,trials\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.m, fmt_sig(p.mean_mse, 6), p.trial_mse.len());
        }
        out
    }
}

/// For each `m`, trains `trials` models on `m` randomly chosen devices
/// (excluding `holdout`) and averages their rollout MSE over every window of
/// the held-out device. The normalizer is fitted once on all non-held-out
/// devices so errors are on one scale for every `m`.
pub fn aggregation_experiment(
    traces: &[DeviceTrace],
    holdout: usize,
    m_values: &[usize],
    trials: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<AggregationCurve> {
    if holdout >= traces.len() {
        return Err(Error::Config(format!("holdout index {holdout} out of range")));
    }
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    let pool: Vec<&DeviceTrace> = traces.iter().enumerate().filter(|(i, _)| *i != holdout).map(|(_, t)| t).collect();
    if let Some(&bad) = m_values.iter().find(|&&m| m == 0 || m > pool.len()) {
        return Err(Error::Config(format!("m={bad} outside 1..={}", pool.len())));
    }
    let normalizer = Normalizer::fit(pool.iter().copied())?;
    let seqs: Vec<Sequence> = pool.iter().map(|t| normalizer.sequence(t)).collect();
    let test = normalizer.sequence(&traces[holdout]);
    let mut points = Vec::with_capacity(m_values.len());
    for &m in m_values {
        let mut trial_mse = Vec::with_capacity(trials);
        for trial in 0..trials {
            let trial_seed = seed ^ ((m as u64) << 32) ^ trial as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
            let chosen: Vec<Sequence> = sample_indices(&mut rng, seqs.len(), m)
                .into_iter()
                .map(|i| seqs[i].clone())
                .collect();
            let mut c = *cfg;
            c.m = m;
            let outcome = train(&chosen, &test, &c, trial_seed)?;
            trial_mse.push(evaluate_windows(&outcome.best, &test, 1)?);
        }
        let mean_mse = trial_mse.iter().sum::<f64>() / trials as f64;
        points.push(AggregationPoint { m, mean_mse, trial_mse });
    }
    let mut sorted: Vec<&AggregationPoint> = points.iter().collect();
    sorted.sort_by_key(|p| p.m);
    let monotone = sorted.windows(2).all(|w| w[1].mean_mse < w[0].mean_mse);
    Ok(AggregationCurve {
        holdout: traces[holdout].device_id.clone(),
        points,
        monotone,
    })
}
