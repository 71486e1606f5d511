//! The closed loop: embed → update estimator → evaluate ψ → decide → store.
//!
//! With the default [`EstimatorScope::AllSamples`] every incoming embedding
//! updates the estimator *before* ψ is evaluated, so the current sample is
//! part of its own belief. Accepted samples are appended to the dataset and
//! never removed.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::control::{decide, Decision};
use crate::estimator::{EstimatorError, EstimatorState, RegularizationConfig};
use crate::metrics::{self, Bounds, MetricsPoint};
use crate::rng::CounterRng;
use crate::value::{evaluate, PolicyConfig, ValueFunction};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbedError {
    #[error("record {k}: identity embedding needs a vector payload")]
    NotAVector { k: u64 },
    #[error("record {k}: missing count field `{field}`")]
    MissingField { k: u64, field: String },
    #[error("record {k}: field `{field}` is not a nonnegative integer")]
    NotACount { k: u64, field: String },
    #[error("record {k}: count field needs an annotated record, found a vector")]
    NotARecord { k: u64 },
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("incompatible payload: {0}")]
    IncompatiblePayload(#[from] EmbedError),
    #[error("estimator failure at step {k}: {source}")]
    Estimator {
        k: u64,
        #[source]
        source: EstimatorError,
    },
    #[error("stream error: {0}")]
    Stream(#[from] crate::streams::StreamError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Vector(Vec<f64>),
    Fields(Map<String, Value>),
}

/// One raw datum from the stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamRecord {
    pub k: u64,
    pub payload: Payload,
    pub source_tag: String,
    /// Byte offset of the record in its source file, when it came from one.
    pub offset: Option<u64>,
}

impl StreamRecord {
    pub fn vector(k: u64, v: Vec<f64>, source_tag: &str) -> Self {
        Self {
            k,
            payload: Payload::Vector(v),
            source_tag: source_tag.to_string(),
            offset: None,
        }
    }

    pub fn fields(k: u64, fields: Map<String, Value>, source_tag: &str) -> Self {
        Self {
            k,
            payload: Payload::Fields(fields),
            source_tag: source_tag.to_string(),
            offset: None,
        }
    }

    /// `{"k":…,"vec":[…]}` for vectors, `{"k":…,<fields>}` for records.
    pub fn to_json(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("k".into(), Value::from(self.k));
        match &self.payload {
            Payload::Vector(v) => {
                obj.insert("vec".into(), Value::from(v.clone()));
            }
            Payload::Fields(f) => {
                for (key, val) in f {
                    obj.insert(key.clone(), val.clone());
                }
            }
        }
        Value::Object(obj)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingSpec {
    Identity,
    CountField { field: String },
}

impl EmbeddingSpec {
    pub fn count_field(field: &str) -> Self {
        Self::CountField {
            field: field.to_string(),
        }
    }

    pub fn is_count(&self) -> bool {
        matches!(self, Self::CountField { .. })
    }
}

pub fn embed(spec: &EmbeddingSpec, x: &StreamRecord) -> Result<Vec<f64>, EmbedError> {
    match (spec, &x.payload) {
        (EmbeddingSpec::Identity, Payload::Vector(v)) => Ok(v.clone()),
        (EmbeddingSpec::Identity, Payload::Fields(_)) => Err(EmbedError::NotAVector { k: x.k }),
        (EmbeddingSpec::CountField { .. }, Payload::Vector(_)) => Err(EmbedError::NotARecord { k: x.k }),
        (EmbeddingSpec::CountField { field }, Payload::Fields(f)) => {
            let value = f.get(field).ok_or_else(|| EmbedError::MissingField {
                k: x.k,
                field: field.clone(),
            })?;
            as_count(value)
                .map(|c| vec![c as f64])
                .ok_or_else(|| EmbedError::NotACount {
                    k: x.k,
                    field: field.clone(),
                })
        }
    }
}

fn as_count(v: &Value) -> Option<u64> {
    if let Some(c) = v.as_u64() {
        return Some(c);
    }
    let f = v.as_f64()?;
    (f >= 0.0 && f.fract() == 0.0 && f <= u32::MAX as f64).then_some(f as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorScope {
    #[default]
    AllSamples,
    AcceptedOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptedSample {
    pub k: u64,
    pub z: Vec<f64>,
    /// Reference into the source instead of a copy of the payload.
    pub offset: Option<u64>,
}

/// Per-dimension values kept sorted lazily: new values land in a pending
/// buffer and are merged in when a sorted view is requested.
#[derive(Debug, Clone, Default)]
struct SortedColumns {
    sorted: Vec<Vec<f64>>,
    pending: Vec<Vec<f64>>,
}

impl SortedColumns {
    fn push(&mut self, z: &[f64]) {
        if self.sorted.is_empty() {
            self.sorted = vec![Vec::new(); z.len()];
            self.pending = vec![Vec::new(); z.len()];
        }
        for (p, &v) in self.pending.iter_mut().zip(z) {
            p.push(v);
        }
    }

    fn view(&mut self) -> &[Vec<f64>] {
        for (s, p) in self.sorted.iter_mut().zip(self.pending.iter_mut()) {
            if p.is_empty() {
                continue;
            }
            p.sort_by(f64::total_cmp);
            let mut merged = Vec::with_capacity(s.len() + p.len());
            let (mut i, mut j) = (0, 0);
            while i < s.len() && j < p.len() {
                if s[i] <= p[j] {
                    merged.push(s[i]);
                    i += 1;
                } else {
                    merged.push(p[j]);
                    j += 1;
                }
            }
            merged.extend_from_slice(&s[i..]);
            merged.extend_from_slice(&p[j..]);
            *s = merged;
            p.clear();
        }
        &self.sorted
    }
}

/// Append-only store of accepted samples.
#[derive(Debug, Clone, Default)]
pub struct DatasetState {
    accepted: Vec<AcceptedSample>,
    columns: SortedColumns,
    counts: Vec<u64>,
}

impl DatasetState {
    pub fn len(&self) -> usize {
        self.accepted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accepted.is_empty()
    }

    pub fn accepted(&self) -> &[AcceptedSample] {
        &self.accepted
    }

    fn push(&mut self, sample: AcceptedSample, count_embedding: bool) {
        self.columns.push(&sample.z);
        if count_embedding {
            let c = sample.z[0] as usize;
            if self.counts.len() <= c {
                self.counts.resize(c + 1, 0);
            }
            self.counts[c] += 1;
        }
        self.accepted.push(sample);
    }

    /// Accepted values per dimension, each sorted ascending.
    pub fn sorted_columns(&mut self) -> &[Vec<f64>] {
        self.columns.view()
    }

    /// Histogram of accepted counts over `0..=max` (count embeddings only).
    pub fn count_histogram(&self, max: usize) -> Vec<u64> {
        let mut h = vec![0; max + 1];
        for (c, &n) in self.counts.iter().enumerate().take(max + 1) {
            h[c] = n;
        }
        h
    }

    /// Accepted values as per-dimension columns, in acceptance order.
    pub fn columns(&self) -> Vec<Vec<f64>> {
        let d = self.accepted.first().map_or(0, |s| s.z.len());
        (0..d)
            .map(|j| self.accepted.iter().map(|s| s.z[j]).collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// Emit a metrics point every `interval` steps; 0 keeps only the final one.
    pub interval: u64,
    /// Largest category for count histograms; defaults to the largest count
    /// seen in the stream so far.
    pub count_max: Option<usize>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            interval: 100,
            count_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub embedding: EmbeddingSpec,
    pub policy: PolicyConfig,
    #[serde(default)]
    pub regularization: RegularizationConfig,
    #[serde(default)]
    pub estimator_scope: EstimatorScope,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

impl PipelineConfig {
    pub fn new(embedding: EmbeddingSpec, policy: PolicyConfig) -> Self {
        Self {
            embedding,
            policy,
            regularization: RegularizationConfig::default(),
            estimator_scope: EstimatorScope::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineState {
    config: PipelineConfig,
    estimator: Option<EstimatorState>,
    dataset: DatasetState,
    decision_log: Vec<Decision>,
    max_count_seen: usize,
    digest: Sha256,
}

impl PipelineState {
    pub fn new(config: PipelineConfig) -> Self {
        Self {
            config,
            estimator: None,
            dataset: DatasetState::default(),
            decision_log: Vec::new(),
            max_count_seen: 0,
            digest: Sha256::new(),
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn estimator(&self) -> Option<&EstimatorState> {
        self.estimator.as_ref()
    }

    pub fn dataset(&self) -> &DatasetState {
        &self.dataset
    }

    pub fn decision_log(&self) -> &[Decision] {
        &self.decision_log
    }

    pub fn steps(&self) -> u64 {
        self.decision_log.len() as u64
    }

    /// SHA-256 over the little-endian bytes of every embedding processed.
    pub fn embedding_digest(&self) -> String {
        hex::encode(self.digest.clone().finalize())
    }

    fn estimator_for(&mut self, dim: usize, k: u64) -> Result<&mut EstimatorState, PipelineError> {
        if self.estimator.is_none() {
            self.estimator =
                Some(EstimatorState::new(dim).map_err(|source| PipelineError::Estimator { k, source })?);
        }
        Ok(self.estimator.as_mut().expect("initialized above"))
    }

    /// One pass through the loop for record `x`.
    pub fn step(&mut self, x: &StreamRecord, rng: &mut CounterRng) -> Result<Decision, PipelineError> {
        let z = embed(&self.config.embedding, x)?;
        for v in &z {
            self.digest.update(v.to_le_bytes());
        }
        if self.config.embedding.is_count() {
            self.max_count_seen = self.max_count_seen.max(z[0] as usize);
        }
        let k = x.k;
        let scope = self.config.estimator_scope;
        let estimator_error = |source| PipelineError::Estimator { k, source };

        if scope == EstimatorScope::AllSamples {
            self.estimator_for(z.len(), k)?.update(&z).map_err(estimator_error)?;
        } else {
            // Validate shape and finiteness even though the update may not happen.
            let est = self.estimator_for(z.len(), k)?;
            est.updated(&z).map_err(estimator_error)?;
        }
        let est = self.estimator.as_ref().expect("initialized above");
        let eval = evaluate(&self.config.policy, est, &z, &self.config.regularization)
            .map_err(estimator_error)?;
        let decision = decide(eval.psi, rng, k, eval.d_sq);

        if decision.accepted {
            if scope == EstimatorScope::AcceptedOnly {
                self.estimator_for(z.len(), k)?.update(&z).map_err(estimator_error)?;
            }
            self.dataset.push(
                AcceptedSample {
                    k,
                    z,
                    offset: x.offset,
                },
                self.config.embedding.is_count(),
            );
        }
        self.decision_log.push(decision);
        Ok(decision)
    }

    /// Normalization bounds for the uniformity error: the Mahalanobis
    /// ellipse's bounding box for the reciprocal policy, the empirical range
    /// of the accepted set otherwise.
    pub fn uniformity_bounds(&mut self) -> Vec<Bounds> {
        if let ValueFunction::Reciprocal { r_max_sq } = self.config.policy.value {
            if let Some(b) = self.estimator.as_ref().and_then(|e| {
                ellipse_bounds(e, r_max_sq, &self.config.regularization)
            }) {
                return b;
            }
        }
        let cols = self.dataset.sorted_columns();
        cols.iter()
            .map(|c| match (c.first(), c.last()) {
                (Some(&lo), Some(&hi)) => (lo, hi),
                _ => (0.0, 0.0),
            })
            .collect()
    }

    /// Uniformity error of the first `n` accepted samples. The reciprocal
    /// policy keeps its final ellipse bounds; others use the prefix range.
    pub fn delta_uni_prefix(&self, n: usize) -> Option<f64> {
        let prefix = &self.dataset.accepted[..n.min(self.dataset.len())];
        let d = prefix.first()?.z.len();
        let cols: Vec<Vec<f64>> = (0..d).map(|j| prefix.iter().map(|s| s.z[j]).collect()).collect();
        let ellipse = match self.config.policy.value {
            ValueFunction::Reciprocal { r_max_sq } => self
                .estimator
                .as_ref()
                .and_then(|e| ellipse_bounds(e, r_max_sq, &self.config.regularization)),
            _ => None,
        };
        let bounds = ellipse.unwrap_or_else(|| metrics::empirical_bounds(&cols));
        metrics::delta_uni(&cols, &bounds).ok()
    }

    fn count_max(&self) -> usize {
        self.config.metrics.count_max.unwrap_or(self.max_count_seen)
    }

    /// Current uniformity error, if defined.
    pub fn delta_uni(&mut self) -> Option<f64> {
        let bounds = self.uniformity_bounds();
        let cols = self.dataset.sorted_columns();
        metrics::delta_uni_sorted(cols, &bounds).ok()
    }

    /// CV of the accepted count histogram (count embeddings only).
    pub fn cv(&self) -> Option<f64> {
        if !self.config.embedding.is_count() {
            return None;
        }
        metrics::cv(&self.dataset.count_histogram(self.count_max())).ok()
    }

    pub fn count_histogram(&self) -> Option<Vec<u64>> {
        self.config
            .embedding
            .is_count()
            .then(|| self.dataset.count_histogram(self.count_max()))
    }

    fn metrics_point(&mut self, window_start_n: u64, window_steps: u64) -> MetricsPoint {
        let n = self.dataset.len() as u64;
        MetricsPoint {
            step: self.steps(),
            n,
            delta_uni: self.delta_uni(),
            cv: self.cv(),
            acceptance_rate: if window_steps == 0 {
                0.0
            } else {
                (n - window_start_n) as f64 / window_steps as f64
            },
        }
    }
}

/// Per-dimension bounding box `μ_j ± √(r² Σ_jj)` of the Mahalanobis ellipse.
pub fn ellipse_bounds(
    est: &EstimatorState,
    r_max_sq: f64,
    reg: &RegularizationConfig,
) -> Option<Vec<Bounds>> {
    let cov = est.covariance(reg).ok()?;
    let d = est.dim();
    let b: Vec<Bounds> = (0..d)
        .map(|j| {
            let half = (r_max_sq * cov[j * d + j]).sqrt();
            (est.mean()[j] - half, est.mean()[j] + half)
        })
        .collect();
    b.iter().all(|&(lo, hi)| hi > lo).then_some(b)
}

/// Summary of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub policy: PolicyConfig,
    pub steps: u64,
    #[serde(rename = "N")]
    pub n: u64,
    pub acceptance_fraction: f64,
    pub delta_uni: Option<f64>,
    pub cv: Option<f64>,
    pub embedding_digest: String,
    pub decision_log: String,
    pub metrics: Vec<MetricsPoint>,
    pub estimator: Option<EstimatorState>,
}

pub struct RunOutcome {
    pub report: RunReport,
    pub state: PipelineState,
}

/// Folds [`PipelineState::step`] over the stream, sampling metrics every
/// `config.metrics.interval` steps and once more at the end.
pub fn run<I>(stream: I, config: PipelineConfig, rng: &mut CounterRng) -> Result<RunOutcome, PipelineError>
where
    I: IntoIterator<Item = Result<StreamRecord, PipelineError>>,
{
    let interval = config.metrics.interval;
    let mut state = PipelineState::new(config);
    let mut series = Vec::new();
    let (mut window_start_step, mut window_start_n) = (0u64, 0u64);
    for record in stream {
        state.step(&record?, rng)?;
        let steps = state.steps();
        if interval > 0 && steps.is_multiple_of(interval) {
            series.push(state.metrics_point(window_start_n, steps - window_start_step));
            window_start_step = steps;
            window_start_n = state.dataset.len() as u64;
        }
    }
    let steps = state.steps();
    if steps > 0 && steps != window_start_step {
        series.push(state.metrics_point(window_start_n, steps - window_start_step));
    }
    let n = state.dataset.len() as u64;
    let report = RunReport {
        policy: state.config.policy,
        steps,
        n,
        acceptance_fraction: if steps == 0 { 0.0 } else { n as f64 / steps as f64 },
        delta_uni: state.delta_uni(),
        cv: state.cv(),
        embedding_digest: state.embedding_digest(),
        decision_log: "decisions.jsonl".to_string(),
        metrics: series,
        estimator: state.estimator.clone(),
    };
    Ok(RunOutcome { report, state })
}
