//! `run`, `compare` and `validate` subcommands over a JSON run config.
//!
//! A config fully describes an experiment; the only command-line overrides
//! are the seeds and the output directory.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::control::write_decisions_jsonl;
use crate::estimator::RegularizationConfig;
use crate::metrics::{self, write_histogram_csv, write_metrics_csv, write_qq_csv};
use crate::pipeline::{
    self, EmbeddingSpec, EstimatorScope, MetricsConfig, PipelineConfig, PipelineError, RunOutcome,
    StreamRecord,
};
use crate::rng::RngConfig;
use crate::streams::{self, CountStreamConfig, GaussianStreamConfig, StreamError};
use crate::value::{PolicyConfig, ValueFunction};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read config {path}: {source}")]
    ConfigRead {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid config {path}: {message}")]
    ConfigParse { path: PathBuf, message: String },
    #[error("config violations:\n  - {}", .0.join("\n  - "))]
    Violations(Vec<String>),
    #[error("usage: {0}")]
    Usage(String),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("policies saw different embedded streams ({0})")]
    StreamMismatch(String),
}

impl CliError {
    /// 2 for numerical failures inside the loop, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Pipeline(PipelineError::Estimator { .. }) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StreamSpec {
    /// Defaults to a standard 2-D Gaussian.
    Gaussian {
        n_samples: u64,
        #[serde(default)]
        mean: Option<Vec<f64>>,
        #[serde(default)]
        covariance: Option<Vec<Vec<f64>>>,
    },
    /// Defaults to the surrogate traffic profile.
    Counts {
        #[serde(default)]
        n_samples: Option<u64>,
        #[serde(default)]
        weights: Option<Vec<f64>>,
        #[serde(default)]
        field: Option<String>,
    },
    Jsonl { path: PathBuf },
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedPolicy {
    pub name: String,
    #[serde(flatten)]
    pub policy: PolicyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub stream: StreamSpec,
    #[serde(default)]
    pub embedding: Option<EmbeddingSpec>,
    #[serde(default)]
    pub policy: Option<PolicyConfig>,
    #[serde(default)]
    pub policies: Vec<NamedPolicy>,
    #[serde(default)]
    pub regularization: RegularizationConfig,
    #[serde(default)]
    pub estimator_scope: EstimatorScope,
    #[serde(default)]
    pub seeds: RngConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub max_steps: Option<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Replaces both the stream and the decision seed.
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

/// A parsed config with relative paths resolved.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub path: PathBuf,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|source| CliError::ConfigRead {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::ConfigParse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if let Some(seed) = overrides.seed {
            config.seeds = RngConfig {
                decision_seed: seed,
                stream_seed: seed,
            };
        }
        if let Some(out) = &overrides.out_dir {
            config.out_dir = Some(out.clone());
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self {
            config,
            path: path.to_path_buf(),
            base_dir,
        })
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.config.out_dir.clone().unwrap_or_else(|| {
            let stem = self.path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
            PathBuf::from("out").join(stem)
        })
    }

    pub fn embedding(&self) -> EmbeddingSpec {
        if let Some(e) = &self.config.embedding {
            return e.clone();
        }
        match &self.config.stream {
            StreamSpec::Counts { field, .. } => {
                EmbeddingSpec::count_field(field.as_deref().unwrap_or("vehicles"))
            }
            _ => EmbeddingSpec::Identity,
        }
    }

    fn count_config(&self) -> Option<CountStreamConfig> {
        match &self.config.stream {
            StreamSpec::Counts {
                n_samples,
                weights,
                field,
            } => {
                let mut c = CountStreamConfig::traffic_profile(self.config.seeds.stream_seed);
                if let Some(n) = n_samples {
                    c.n_samples = *n;
                }
                if let Some(w) = weights {
                    c.weights = w.clone();
                }
                if let Some(f) = field {
                    c.field = f.clone();
                }
                Some(c)
            }
            _ => None,
        }
    }

    fn gaussian_config(&self) -> Option<GaussianStreamConfig> {
        match &self.config.stream {
            StreamSpec::Gaussian {
                n_samples,
                mean,
                covariance,
            } => {
                let dim = mean
                    .as_ref()
                    .map(Vec::len)
                    .or_else(|| covariance.as_ref().map(Vec::len))
                    .unwrap_or(2);
                let mut g = GaussianStreamConfig::standard(dim, *n_samples, self.config.seeds.stream_seed);
                if let Some(m) = mean {
                    g.mean = m.clone();
                }
                if let Some(c) = covariance {
                    g.covariance = c.clone();
                }
                Some(g)
            }
            _ => None,
        }
    }

    /// Embedding dimension when it can be known without reading a file.
    pub fn dim_hint(&self) -> Option<usize> {
        if self.embedding().is_count() {
            return Some(1);
        }
        self.gaussian_config().map(|g| g.mean.len())
    }

    /// Opens the configured stream, truncated to `max_steps`.
    pub fn open_stream(&self) -> Result<Box<dyn Iterator<Item = Result<StreamRecord, PipelineError>>>, CliError> {
        let limit = self.config.max_steps.map_or(usize::MAX, |m| m as usize);
        let it: Box<dyn Iterator<Item = Result<StreamRecord, PipelineError>>> = match &self.config.stream {
            StreamSpec::Gaussian { .. } => {
                let cfg = self.gaussian_config().expect("gaussian stream");
                Box::new(streams::gaussian_stream(&cfg)?.map(Ok))
            }
            StreamSpec::Counts { .. } => {
                let cfg = self.count_config().expect("count stream");
                Box::new(streams::count_stream(&cfg)?.map(Ok))
            }
            StreamSpec::Jsonl { path } => {
                Box::new(streams::read_jsonl(self.resolve(path))?.map(|r| r.map_err(Into::into)))
            }
            StreamSpec::Csv { path } => {
                Box::new(streams::read_csv(self.resolve(path))?.map(|r| r.map_err(Into::into)))
            }
        };
        Ok(Box::new(it.take(limit)))
    }

    pub fn pipeline_config(&self, policy: PolicyConfig) -> PipelineConfig {
        let mut metrics = self.config.metrics.clone();
        if metrics.count_max.is_none() {
            metrics.count_max = self.count_config().map(|c| c.max_count());
        }
        PipelineConfig {
            embedding: self.embedding(),
            policy,
            regularization: self.config.regularization,
            estimator_scope: self.config.estimator_scope,
            metrics,
        }
    }

    /// Every violated constraint; `compare` mode allows unresolved random rates.
    pub fn violations(&self, compare: bool) -> Vec<String> {
        let c = &self.config;
        let mut out = c.regularization.violations();
        if compare {
            if c.policies.len() < 2 {
                out.push(format!(
                    "compare needs at least two entries in `policies`, found {}",
                    c.policies.len()
                ));
            }
            for p in &c.policies {
                out.extend(p.policy.violations(false).into_iter().map(|v| format!("{}: {v}", p.name)));
            }
            let open_rate = c
                .policies
                .iter()
                .any(|p| matches!(p.policy.value, ValueFunction::RandomRate { rate: None }));
            if open_rate && !c.policies.iter().any(|p| p.policy.is_feedback()) {
                out.push("random_rate without `rate` needs a feedback policy to match".into());
            }
            let mut names: Vec<&str> = c.policies.iter().map(|p| p.name.as_str()).collect();
            names.sort_unstable();
            if names.windows(2).any(|w| w[0] == w[1]) {
                out.push("policy names must be unique".into());
            }
        } else {
            match &c.policy {
                Some(p) => out.extend(p.violations(true)),
                None => out.push("`policy` is required for run".into()),
            }
        }
        match &c.stream {
            StreamSpec::Jsonl { path } | StreamSpec::Csv { path } => {
                let p = self.resolve(path);
                if !p.is_file() {
                    out.push(format!("stream file {} does not exist", p.display()));
                }
            }
            StreamSpec::Gaussian { .. } => {
                if let Err(e) = streams::gaussian_stream(&self.gaussian_config().expect("gaussian")) {
                    out.push(format!("stream: {e}"));
                }
            }
            StreamSpec::Counts { .. } => {
                if let Err(e) = streams::count_stream(&self.count_config().expect("counts")) {
                    out.push(format!("stream: {e}"));
                }
            }
        }
        out
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| CliError::Write {
            path: path.to_path_buf(),
            source,
        })
}

fn written(path: &Path, r: io::Result<()>) -> Result<(), CliError> {
    r.map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes report.json, metrics.csv, decisions.jsonl, accepted.jsonl,
/// estimator.json, qq.csv and (for count embeddings) histogram.csv.
pub fn write_run_outputs(dir: &Path, outcome: &mut RunOutcome) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Write {
        path: dir.to_path_buf(),
        source,
    })?;
    let report = &outcome.report;
    let p = dir.join("report.json");
    let mut w = create(&p)?;
    written(
        &p,
        serde_json::to_writer_pretty(&mut w, report)
            .map_err(io::Error::from)
            .and_then(|_| writeln!(w))
            .and_then(|_| w.flush()),
    )?;

    let p = dir.join("metrics.csv");
    written(&p, write_metrics_csv(&report.metrics, create(&p)?))?;

    let p = dir.join("decisions.jsonl");
    written(&p, write_decisions_jsonl(outcome.state.decision_log(), create(&p)?))?;

    let p = dir.join("accepted.jsonl");
    let mut w = create(&p)?;
    for s in outcome.state.dataset().accepted() {
        written(
            &p,
            serde_json::to_writer(&mut w, s)
                .map_err(io::Error::from)
                .and_then(|_| w.write_all(b"\n")),
        )?;
    }
    written(&p, w.flush())?;

    let p = dir.join("estimator.json");
    let snapshot = report
        .estimator
        .as_ref()
        .map_or_else(|| "null".to_string(), |e| e.to_json());
    let mut w = create(&p)?;
    written(&p, writeln!(w, "{snapshot}").and_then(|_| w.flush()))?;

    let bounds = outcome.state.uniformity_bounds();
    let columns = outcome.state.dataset().columns();
    if let Ok(qq) = metrics::qq_points(&columns, &bounds) {
        let p = dir.join("qq.csv");
        written(&p, write_qq_csv(&qq, create(&p)?))?;
    }
    if let Some(h) = outcome.state.count_histogram() {
        let p = dir.join("histogram.csv");
        written(&p, write_histogram_csv(&h, create(&p)?))?;
    }
    Ok(())
}

/// Executes one policy over the configured stream and writes its outputs.
pub fn run_config(path: &Path, overrides: &Overrides) -> Result<RunOutcome, CliError> {
    let loaded = LoadedConfig::load(path, overrides)?;
    let violations = loaded.violations(false);
    if !violations.is_empty() {
        return Err(CliError::Violations(violations));
    }
    let policy = loaded.config.policy.expect("checked by violations");
    let stream = loaded.open_stream()?;
    let mut rng = loaded.config.seeds.decision_rng();
    let mut outcome = pipeline::run(stream, loaded.pipeline_config(policy), &mut rng)?;
    write_run_outputs(&loaded.out_dir(), &mut outcome)?;
    Ok(outcome)
}

/// One row of the comparison summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub policy: String,
    pub variant: String,
    #[serde(rename = "N")]
    pub n: u64,
    pub acceptance_fraction: f64,
    pub delta_uni: Option<f64>,
    /// Uniformity error over the first `matched_n` accepted samples.
    pub delta_uni_matched: Option<f64>,
    pub matched_n: u64,
    pub cv: Option<f64>,
    pub embedding_digest: String,
}

pub struct Comparison {
    pub rows: Vec<SummaryRow>,
    pub outcomes: Vec<(String, RunOutcome)>,
}

fn run_policies(
    loaded: &LoadedConfig,
    records: &[StreamRecord],
    policies: &[(usize, PolicyConfig)],
) -> Vec<(usize, Result<RunOutcome, PipelineError>)> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = policies
            .iter()
            .map(|&(i, policy)| {
                let cfg = loaded.pipeline_config(policy);
                let mut rng = loaded.config.seeds.decision_rng();
                scope.spawn(move || (i, pipeline::run(records.iter().cloned().map(Ok), cfg, &mut rng)))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("pipeline thread panicked"))
            .collect()
    })
}

/// Runs every listed policy on the identical stream.
pub fn compare_config(path: &Path, overrides: &Overrides) -> Result<Comparison, CliError> {
    let loaded = LoadedConfig::load(path, overrides)?;
    let policies = &loaded.config.policies;
    if policies.len() < 2 {
        return Err(CliError::Usage(format!(
            "compare needs at least two policies, {} listed in {}",
            policies.len(),
            path.display()
        )));
    }
    let violations = loaded.violations(true);
    if !violations.is_empty() {
        return Err(CliError::Violations(violations));
    }
    let records: Vec<StreamRecord> = loaded.open_stream()?.collect::<Result<_, _>>()?;

    let needs_rate = |p: &PolicyConfig| matches!(p.value, ValueFunction::RandomRate { rate: None });
    let first: Vec<(usize, PolicyConfig)> = policies
        .iter()
        .enumerate()
        .filter(|(_, p)| !needs_rate(&p.policy))
        .map(|(i, p)| (i, p.policy))
        .collect();
    let mut results: Vec<Option<RunOutcome>> = (0..policies.len()).map(|_| None).collect();
    for (i, r) in run_policies(&loaded, &records, &first) {
        results[i] = Some(r?);
    }
    let matched_rate = policies
        .iter()
        .enumerate()
        .find(|(_, p)| p.policy.is_feedback())
        .and_then(|(i, _)| results[i].as_ref())
        .map(|o| o.report.acceptance_fraction);
    let second: Vec<(usize, PolicyConfig)> = policies
        .iter()
        .enumerate()
        .filter(|(_, p)| needs_rate(&p.policy))
        .map(|(i, p)| {
            let mut policy = p.policy;
            policy.value = ValueFunction::RandomRate { rate: matched_rate };
            (i, policy)
        })
        .collect();
    for (i, r) in run_policies(&loaded, &records, &second) {
        results[i] = Some(r?);
    }
    let mut outcomes: Vec<(String, RunOutcome)> = policies
        .iter()
        .zip(results)
        .map(|(p, o)| (p.name.clone(), o.expect("every policy ran")))
        .collect();

    let digests: Vec<&str> = outcomes.iter().map(|(_, o)| o.report.embedding_digest.as_str()).collect();
    if digests.windows(2).any(|w| w[0] != w[1]) {
        return Err(CliError::StreamMismatch(digests.join(", ")));
    }

    let matched_n = outcomes.iter().map(|(_, o)| o.report.n).min().unwrap_or(0);
    let rows: Vec<SummaryRow> = outcomes
        .iter_mut()
        .map(|(name, o)| SummaryRow {
            policy: name.clone(),
            variant: o.report.policy.name().to_string(),
            n: o.report.n,
            acceptance_fraction: o.report.acceptance_fraction,
            delta_uni: o.report.delta_uni,
            delta_uni_matched: o.state.delta_uni_prefix(matched_n as usize),
            matched_n,
            cv: o.report.cv,
            embedding_digest: o.report.embedding_digest.clone(),
        })
        .collect();

    let out = loaded.out_dir();
    for (name, o) in outcomes.iter_mut() {
        write_run_outputs(&out.join(name.as_str()), o)?;
    }
    let p = out.join("comparison.csv");
    let mut w = create(&p)?;
    let mut body = String::from("policy,step,N,delta_uni,cv,acceptance_rate\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (name, o) in &outcomes {
        for m in &o.report.metrics {
            body.push_str(&format!(
                "{name},{},{},{},{},{}\n",
                m.step,
                m.n,
                opt(m.delta_uni),
                opt(m.cv),
                m.acceptance_rate
            ));
        }
    }
    written(&p, w.write_all(body.as_bytes()).and_then(|_| w.flush()))?;

    let p = out.join("summary.csv");
    let mut w = create(&p)?;
    let mut body =
        String::from("policy,variant,N,acceptance_fraction,delta_uni,delta_uni_matched,matched_N,cv\n");
    for r in &rows {
        body.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.policy,
            r.variant,
            r.n,
            r.acceptance_fraction,
            opt(r.delta_uni),
            opt(r.delta_uni_matched),
            r.matched_n,
            opt(r.cv)
        ));
    }
    written(&p, w.write_all(body.as_bytes()).and_then(|_| w.flush()))?;

    Ok(Comparison { rows, outcomes })
}

/// Resolved view of a config, as printed by `validate`.
pub fn resolved_summary(loaded: &LoadedConfig) -> serde_json::Value {
    let dim = loaded.dim_hint();
    let describe = |name: &str, p: &PolicyConfig| {
        let mut v = json!({ "name": name, "variant": p.name() });
        match p.value {
            ValueFunction::Complementary { nu } => v["nu"] = json!(nu),
            ValueFunction::Reciprocal { r_max_sq } => v["r_max_sq"] = json!(r_max_sq),
            ValueFunction::RandomRate { rate } => {
                v["rate"] = rate.map_or(json!("matched"), |r| json!(r));
            }
            ValueFunction::OpenLoop => {}
        }
        v["n_min"] = match dim {
            Some(d) => json!(p.warmup_floor(d)),
            None => json!(format!(
                "max(d+2, {})",
                p.warmup_min_samples.unwrap_or(crate::value::DEFAULT_WARMUP_MIN_SAMPLES)
            )),
        };
        v
    };
    let mut policies: Vec<serde_json::Value> = Vec::new();
    if let Some(p) = &loaded.config.policy {
        policies.push(describe("policy", p));
    }
    for p in &loaded.config.policies {
        policies.push(describe(&p.name, &p.policy));
    }
    json!({
        "config": loaded.path,
        "stream": loaded.config.stream,
        "embedding": loaded.embedding(),
        "dim": dim,
        "policies": policies,
        "regularization": loaded.config.regularization,
        "estimator_scope": loaded.config.estimator_scope,
        "seeds": loaded.config.seeds,
        "metrics": loaded.pipeline_config(PolicyConfig::open_loop()).metrics,
        "max_steps": loaded.config.max_steps,
        "out_dir": loaded.out_dir(),
    })
}

/// Parses and checks a config in both modes it could be used for.
pub fn validate_config(path: &Path, overrides: &Overrides) -> Result<serde_json::Value, CliError> {
    let loaded = LoadedConfig::load(path, overrides)?;
    let compare = loaded.config.policy.is_none() && !loaded.config.policies.is_empty();
    let violations = loaded.violations(compare);
    if !violations.is_empty() {
        return Err(CliError::Violations(violations));
    }
    Ok(resolved_summary(&loaded))
}

fn report_error(e: &CliError) -> i32 {
    eprintln!("error: {e}");
    e.exit_code()
}

pub fn cmd_run(path: &Path, overrides: &Overrides) -> i32 {
    match run_config(path, overrides) {
        Ok(o) => {
            println!(
                "steps={} N={} acceptance={:.4} delta_uni={} cv={}",
                o.report.steps,
                o.report.n,
                o.report.acceptance_fraction,
                o.report.delta_uni.map_or("-".into(), |d| format!("{d:.4}")),
                o.report.cv.map_or("-".into(), |c| format!("{c:.4}")),
            );
            0
        }
        Err(e) => report_error(&e),
    }
}

pub fn cmd_compare(path: &Path, overrides: &Overrides) -> i32 {
    match compare_config(path, overrides) {
        Ok(c) => {
            let f = |v: Option<f64>| v.map_or("-".into(), |x| format!("{x:.4}"));
            println!(
                "{:<16} {:<14} {:>8} {:>8} {:>10} {:>10} {:>8}",
                "policy", "variant", "N", "rate", "delta_uni", "matched", "cv"
            );
            for r in &c.rows {
                println!(
                    "{:<16} {:<14} {:>8} {:>8.4} {:>10} {:>10} {:>8}",
                    r.policy,
                    r.variant,
                    r.n,
                    r.acceptance_fraction,
                    f(r.delta_uni),
                    f(r.delta_uni_matched),
                    f(r.cv)
                );
            }
            0
        }
        Err(e) => report_error(&e),
    }
}

pub fn cmd_validate(path: &Path, overrides: &Overrides) -> i32 {
    match validate_config(path, overrides) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
            0
        }
        Err(e) => report_error(&e),
    }
}
