//! Input streams: seeded synthetic generators and JSONL/CSV readers.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::linalg::{self, Cholesky};
use crate::pipeline::{Payload, StreamRecord};
use crate::rng::{CounterRng, DATA_STREAM};

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("covariance is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("mean has length {mean}, covariance is {cov}×{cov}")]
    ShapeMismatch { mean: usize, cov: usize },
    #[error("count weights must be finite, nonnegative and not all zero")]
    InvalidWeights,
    #[error("count stream needs K ≥ 1")]
    InvalidMaxCount,
    #[error("cannot open {path}: {source}")]
    Open {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Box-Muller normals from a uniform source, caching the second variate.
#[derive(Debug, Clone)]
pub struct NormalSampler {
    rng: CounterRng,
    spare: Option<f64>,
}

impl NormalSampler {
    pub fn new(rng: CounterRng) -> Self {
        Self { rng, spare: None }
    }

    pub fn sample(&mut self) -> f64 {
        if let Some(s) = self.spare.take() {
            return s;
        }
        let radius = (-2.0 * self.rng.uniform_open_low().ln()).sqrt();
        let angle = std::f64::consts::TAU * self.rng.uniform();
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStreamConfig {
    pub seed: u64,
    pub n_samples: u64,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

impl GaussianStreamConfig {
    pub fn standard(dim: usize, n_samples: u64, seed: u64) -> Self {
        Self {
            seed,
            n_samples,
            mean: vec![0.0; dim],
            covariance: linalg::to_rows(&linalg::identity(dim), dim),
        }
    }
}

pub struct GaussianStream {
    normals: NormalSampler,
    factor: Cholesky,
    mean: Vec<f64>,
    next: u64,
    end: u64,
}

impl Iterator for GaussianStream {
    type Item = StreamRecord;

    fn next(&mut self) -> Option<StreamRecord> {
        if self.next >= self.end {
            return None;
        }
        let white: Vec<f64> = (0..self.mean.len()).map(|_| self.normals.sample()).collect();
        let v = self
            .factor
            .mul_lower(&white)
            .into_iter()
            .zip(&self.mean)
            .map(|(x, m)| x + m)
            .collect();
        let k = self.next;
        self.next += 1;
        Some(StreamRecord::vector(k, v, "gaussian"))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.end - self.next) as usize;
        (left, Some(left))
    }
}

/// I.i.d. draws `mean + L·w` with `L Lᵀ = covariance` and `w` standard normal.
pub fn gaussian_stream(cfg: &GaussianStreamConfig) -> Result<GaussianStream, StreamError> {
    let (cov, dim) = linalg::flatten_square(&cfg.covariance).ok_or(StreamError::NotPositiveDefinite)?;
    if dim != cfg.mean.len() || dim == 0 {
        return Err(StreamError::ShapeMismatch {
            mean: cfg.mean.len(),
            cov: dim,
        });
    }
    let symmetric = (0..dim).all(|i| (0..i).all(|j| cov[i * dim + j] == cov[j * dim + i]));
    let factor = symmetric
        .then(|| Cholesky::factor(&cov, dim, 0.0))
        .flatten()
        .ok_or(StreamError::NotPositiveDefinite)?;
    Ok(GaussianStream {
        normals: NormalSampler::new(CounterRng::new(cfg.seed, DATA_STREAM)),
        factor,
        mean: cfg.mean.clone(),
        next: 0,
        end: cfg.n_samples,
    })
}

/// Default surrogate profile over 0..=20 vehicles per frame: a broad peak
/// over 8–11 with a thin tail.
pub const TRAFFIC_PROFILE_WEIGHTS: [f64; 21] = [
    4.0, 5.0, 6.0, 7.0, 9.0, 11.0, 13.0, 16.0, 22.0, 24.0, 24.0, 22.0, 15.0, 11.0, 9.0, 7.0, 5.0,
    4.0, 3.0, 2.0, 1.5,
];
pub const TRAFFIC_PROFILE_SAMPLES: u64 = 1356;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountStreamConfig {
    pub seed: u64,
    pub n_samples: u64,
    /// Unnormalized probabilities of counts `0..=K`; `K = weights.len() − 1`.
    pub weights: Vec<f64>,
    #[serde(default = "default_count_field")]
    pub field: String,
}

fn default_count_field() -> String {
    "vehicles".to_string()
}

impl CountStreamConfig {
    pub fn traffic_profile(seed: u64) -> Self {
        Self {
            seed,
            n_samples: TRAFFIC_PROFILE_SAMPLES,
            weights: TRAFFIC_PROFILE_WEIGHTS.to_vec(),
            field: default_count_field(),
        }
    }

    pub fn max_count(&self) -> usize {
        self.weights.len().saturating_sub(1)
    }
}

pub struct CountStream {
    rng: CounterRng,
    cumulative: Vec<f64>,
    field: String,
    next: u64,
    end: u64,
}

impl Iterator for CountStream {
    type Item = StreamRecord;

    fn next(&mut self) -> Option<StreamRecord> {
        if self.next >= self.end {
            return None;
        }
        let total = *self.cumulative.last().expect("nonempty weights");
        let u = self.rng.uniform() * total;
        // First category whose cumulative weight exceeds u; zero-weight
        // categories have equal neighbours and are never picked.
        let c = self.cumulative.partition_point(|&w| w <= u).min(self.cumulative.len() - 1);
        let mut fields = Map::new();
        fields.insert(self.field.clone(), Value::from(c as u64));
        let k = self.next;
        self.next += 1;
        Some(StreamRecord::fields(k, fields, "counts"))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.end - self.next) as usize;
        (left, Some(left))
    }
}

/// I.i.d. categorical counts with probabilities proportional to `weights`.
pub fn count_stream(cfg: &CountStreamConfig) -> Result<CountStream, StreamError> {
    if cfg.weights.len() < 2 {
        return Err(StreamError::InvalidMaxCount);
    }
    if cfg.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || cfg.weights.iter().all(|&w| w == 0.0) {
        return Err(StreamError::InvalidWeights);
    }
    let cumulative = cfg
        .weights
        .iter()
        .scan(0.0, |acc, &w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    Ok(CountStream {
        rng: CounterRng::new(cfg.seed, DATA_STREAM),
        cumulative,
        field: cfg.field.clone(),
        next: 0,
        end: cfg.n_samples,
    })
}

fn open(path: &Path) -> Result<File, StreamError> {
    File::open(path).map_err(|source| StreamError::Open {
        path: path.to_path_buf(),
        source,
    })
}

/// Line-by-line JSONL reader. Each line is `{"k":…,"vec":[…]}` or an
/// annotated record such as `{"k":…,"vehicles":…}`. `k` may be omitted and is
/// then assigned sequentially; it must strictly increase.
pub struct JsonlReader {
    path: PathBuf,
    lines: io::Lines<BufReader<File>>,
    line_no: usize,
    offset: u64,
    next_k: u64,
    last_k: Option<u64>,
    failed: bool,
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<JsonlReader, StreamError> {
    let path = path.as_ref();
    Ok(JsonlReader {
        path: path.to_path_buf(),
        lines: BufReader::new(open(path)?).lines(),
        line_no: 0,
        offset: 0,
        next_k: 0,
        last_k: None,
        failed: false,
    })
}

impl JsonlReader {
    fn err(&self, message: impl Into<String>) -> StreamError {
        StreamError::Parse {
            path: self.path.clone(),
            line: self.line_no,
            message: message.into(),
        }
    }

    fn parse(&mut self, line: &str, offset: u64) -> Result<StreamRecord, String> {
        let obj: Map<String, Value> = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let (k, payload, source_tag) = record_from_object(obj, "jsonl")?;
        let k = sequence(&mut self.next_k, &mut self.last_k, k)?;
        Ok(StreamRecord {
            k,
            payload,
            source_tag,
            offset: Some(offset),
        })
    }
}

fn record_from_object(mut obj: Map<String, Value>, default_tag: &str) -> Result<(Option<u64>, Payload, String), String> {
    let k = match obj.remove("k") {
        None => None,
        Some(v) => Some(v.as_u64().ok_or("`k` must be a nonnegative integer")?),
    };
    let tag = match obj.remove("source_tag") {
        Some(Value::String(s)) => s,
        Some(_) => return Err("`source_tag` must be a string".into()),
        None => default_tag.to_string(),
    };
    let payload = match obj.remove("vec") {
        Some(Value::Array(items)) => Payload::Vector(
            items
                .iter()
                .map(|v| v.as_f64().ok_or("`vec` entries must be numbers"))
                .collect::<Result<_, _>>()?,
        ),
        Some(_) => return Err("`vec` must be an array".into()),
        None if obj.is_empty() => return Err("record has neither `vec` nor annotation fields".into()),
        None => Payload::Fields(obj),
    };
    Ok((k, payload, tag))
}

/// Assigns or checks `k` for the next record.
fn sequence(next_k: &mut u64, last_k: &mut Option<u64>, k: Option<u64>) -> Result<u64, String> {
    let k = k.unwrap_or(*next_k);
    if let Some(last) = *last_k {
        if k <= last {
            return Err(format!("k = {k} does not increase (previous {last})"));
        }
    }
    *last_k = Some(k);
    *next_k = k + 1;
    Ok(k)
}

impl Iterator for JsonlReader {
    type Item = Result<StreamRecord, StreamError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => {
                    self.failed = true;
                    self.line_no += 1;
                    return Some(Err(self.err(e.to_string())));
                }
            };
            self.line_no += 1;
            let start = self.offset;
            self.offset += line.len() as u64 + 1;
            if line.trim().is_empty() {
                continue;
            }
            let result = self.parse(&line, start).map_err(|m| self.err(m));
            self.failed = result.is_err();
            return Some(result);
        }
    }
}

/// CSV reader. A header row is required. Columns `x0, x1, …` form a vector
/// payload; otherwise every column except `k` and `source_tag` becomes an
/// annotation field (numeric where it parses).
pub struct CsvReader {
    path: PathBuf,
    reader: csv::Reader<File>,
    headers: Vec<String>,
    vector_columns: Option<Vec<usize>>,
    next_k: u64,
    last_k: Option<u64>,
    failed: bool,
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<CsvReader, StreamError> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(open(path)?);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| StreamError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let vector_columns = vector_layout(&headers);
    Ok(CsvReader {
        path: path.to_path_buf(),
        reader,
        headers,
        vector_columns,
        next_k: 0,
        last_k: None,
        failed: false,
    })
}

fn vector_layout(headers: &[String]) -> Option<Vec<usize>> {
    let mut cols = Vec::new();
    for i in 0.. {
        match headers.iter().position(|h| *h == format!("x{i}")) {
            Some(c) => cols.push(c),
            None => break,
        }
    }
    let others = headers.iter().filter(|h| *h != "k" && *h != "source_tag").count();
    (!cols.is_empty() && cols.len() == others).then_some(cols)
}

impl CsvReader {
    fn parse(&mut self, row: &csv::StringRecord) -> Result<StreamRecord, String> {
        let mut k = None;
        let mut tag = "csv".to_string();
        let mut fields = Map::new();
        for (h, cell) in self.headers.iter().zip(row.iter()) {
            let cell = cell.trim();
            match h.as_str() {
                "k" if !cell.is_empty() => {
                    k = Some(cell.parse::<u64>().map_err(|_| format!("bad k `{cell}`"))?);
                }
                "k" => {}
                "source_tag" => tag = cell.to_string(),
                _ => {
                    let v = match cell.parse::<i64>() {
                        Ok(i) => Value::from(i),
                        Err(_) => match cell.parse::<f64>() {
                            Ok(f) => Value::from(f),
                            Err(_) => Value::from(cell),
                        },
                    };
                    fields.insert(h.clone(), v);
                }
            }
        }
        let payload = match &self.vector_columns {
            Some(cols) => Payload::Vector(
                cols.iter()
                    .map(|&c| {
                        row.get(c)
                            .and_then(|s| s.trim().parse::<f64>().ok())
                            .ok_or_else(|| format!("column {} is not a number", self.headers[c]))
                    })
                    .collect::<Result<_, _>>()?,
            ),
            None => Payload::Fields(fields),
        };
        let k = sequence(&mut self.next_k, &mut self.last_k, k)?;
        Ok(StreamRecord {
            k,
            payload,
            source_tag: tag,
            offset: row.position().map(|p| p.byte()),
        })
    }
}

impl Iterator for CsvReader {
    type Item = Result<StreamRecord, StreamError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let mut row = csv::StringRecord::new();
        let result = match self.reader.read_record(&mut row) {
            Ok(false) => return None,
            Ok(true) => {
                let line = row.position().map_or(0, |p| p.line() as usize);
                self.parse(&row).map_err(|message| StreamError::Parse {
                    path: self.path.clone(),
                    line,
                    message,
                })
            }
            Err(e) => Err(StreamError::Parse {
                path: self.path.clone(),
                line: e.position().map_or(0, |p| p.line() as usize),
                message: e.to_string(),
            }),
        };
        self.failed = result.is_err();
        Some(result)
    }
}

pub fn write_jsonl<'a, W: Write>(
    records: impl IntoIterator<Item = &'a StreamRecord>,
    mut out: W,
) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, &r.to_json())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
