//! Online Gaussian belief over the embedded stream.
//!
//! The state keeps the running mean and the co-moment matrix
//! `C = Σ (z − μ_old)(z − μ_new)ᵀ` (Welford). The covariance `C / (n − 1)` is
//! derived on demand, optionally shrunk toward a scaled identity, and factored
//! once per state. All distance and density queries go through that Cholesky
//! factor; no explicit inverse is ever formed.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Cholesky};

/// Largest relative jitter tried before giving up on a factorization.
pub const MAX_JITTER: f64 = 1e-3;
/// Pivots at or below `PIVOT_TOLERANCE * trace / d` count as singular.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error("dimension mismatch: estimator has d = {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value in embedding at index {index}")]
    NonFinite { index: usize },
    #[error("insufficient samples: need at least {needed}, have {have}")]
    InsufficientSamples { needed: u64, have: u64 },
    #[error("covariance is singular even after jitter of {max_jitter:e}·trace/d")]
    SingularCovariance { max_jitter: f64 },
    #[error("dimension must be positive")]
    ZeroDimension,
    #[error("invalid snapshot: {0}")]
    InvalidSnapshot(String),
}

/// Optional shrinkage of the covariance toward `trace(Σ)/d · I`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shrinkage {
    #[default]
    Off,
    /// Fixed blend weight λ ∈ [0, 1].
    Fixed(f64),
    /// Data-driven λ from the Rao-Blackwellised Ledoit-Wolf formula, which
    /// needs only Σ and n under a Gaussian model.
    Analytic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegularizationConfig {
    /// Starting relative diagonal jitter, escalated ×10 up to [`MAX_JITTER`]
    /// when the factorization fails. Zero disables recovery.
    pub jitter: f64,
    pub shrinkage: Shrinkage,
}

impl Default for RegularizationConfig {
    fn default() -> Self {
        Self {
            jitter: 1e-9,
            shrinkage: Shrinkage::Off,
        }
    }
}

impl RegularizationConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            out.push(format!("regularization.jitter must be ≥ 0, got {}", self.jitter));
        }
        if let Shrinkage::Fixed(l) = self.shrinkage {
            if !(0.0..=1.0).contains(&l) {
                out.push(format!("regularization.shrinkage fixed λ ∈ [0,1], got {l}"));
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Factored {
    reg: RegularizationConfig,
    covariance: Vec<f64>,
    factor: Option<Cholesky>,
}

/// Running `(n, μ, C)` over `d`-dimensional embeddings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "Snapshot", try_from = "Snapshot")]
pub struct EstimatorState {
    n: u64,
    dim: usize,
    mu: Vec<f64>,
    comoment: Vec<f64>,
    cache: OnceLock<Factored>,
}

impl PartialEq for EstimatorState {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n
            && self.dim == other.dim
            && self.mu == other.mu
            && self.comoment == other.comoment
    }
}

impl EstimatorState {
    pub fn new(dim: usize) -> Result<Self, EstimatorError> {
        if dim == 0 {
            return Err(EstimatorError::ZeroDimension);
        }
        Ok(Self {
            n: 0,
            dim,
            mu: vec![0.0; dim],
            comoment: vec![0.0; dim * dim],
            cache: OnceLock::new(),
        })
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mu
    }

    /// Co-moment matrix, row-major.
    pub fn comoment(&self) -> &[f64] {
        &self.comoment
    }

    pub fn reset(&mut self) {
        self.n = 0;
        self.mu.iter_mut().for_each(|m| *m = 0.0);
        self.comoment.iter_mut().for_each(|c| *c = 0.0);
        self.cache = OnceLock::new();
    }

    fn check(&self, z: &[f64]) -> Result<(), EstimatorError> {
        if z.len() != self.dim {
            return Err(EstimatorError::DimensionMismatch {
                expected: self.dim,
                found: z.len(),
            });
        }
        if let Some(index) = z.iter().position(|v| !v.is_finite()) {
            return Err(EstimatorError::NonFinite { index });
        }
        Ok(())
    }

    /// One Welford step: `δ = z − μ`, `μ += δ/n`, `C += δ (z − μ)ᵀ`.
    ///
    /// The upper triangle is computed and mirrored so `C` stays exactly
    /// symmetric.
    pub fn update(&mut self, z: &[f64]) -> Result<(), EstimatorError> {
        self.check(z)?;
        let d = self.dim;
        self.n += 1;
        let n = self.n as f64;
        let delta: Vec<f64> = z.iter().zip(&self.mu).map(|(z, m)| z - m).collect();
        for (m, dl) in self.mu.iter_mut().zip(&delta) {
            *m += dl / n;
        }
        let resid: Vec<f64> = z.iter().zip(&self.mu).map(|(z, m)| z - m).collect();
        for i in 0..d {
            for j in i..d {
                let v = self.comoment[i * d + j] + delta[i] * resid[j];
                self.comoment[i * d + j] = v;
                self.comoment[j * d + i] = v;
            }
        }
        self.cache = OnceLock::new();
        Ok(())
    }

    /// Functional form of [`update`](Self::update).
    pub fn updated(&self, z: &[f64]) -> Result<Self, EstimatorError> {
        let mut next = self.clone();
        next.update(z)?;
        Ok(next)
    }

    /// Unregularized sample covariance `C / (n − 1)`.
    pub fn sample_covariance(&self) -> Result<Vec<f64>, EstimatorError> {
        if self.n < 2 {
            return Err(EstimatorError::InsufficientSamples {
                needed: 2,
                have: self.n,
            });
        }
        let denom = (self.n - 1) as f64;
        Ok(self.comoment.iter().map(|c| c / denom).collect())
    }

    /// Shrinkage weight λ that `reg` would apply to the current covariance.
    pub fn shrinkage_intensity(&self, reg: &RegularizationConfig) -> Result<f64, EstimatorError> {
        let sigma = self.sample_covariance()?;
        Ok(shrinkage_weight(&sigma, self.dim, self.n, reg.shrinkage))
    }

    fn factored(&self, reg: &RegularizationConfig) -> Result<Factored, EstimatorError> {
        let d = self.dim;
        let mut sigma = self.sample_covariance()?;
        let lambda = shrinkage_weight(&sigma, d, self.n, reg.shrinkage);
        let scale = linalg::trace(&sigma, d) / d as f64;
        if lambda > 0.0 {
            for i in 0..d {
                for j in 0..d {
                    let target = if i == j { scale } else { 0.0 };
                    sigma[i * d + j] = (1.0 - lambda) * sigma[i * d + j] + lambda * target;
                }
            }
        }
        let min_pivot = PIVOT_TOLERANCE * scale;
        if let Some(f) = Cholesky::factor(&sigma, d, min_pivot) {
            return Ok(Factored {
                reg: *reg,
                covariance: sigma,
                factor: Some(f),
            });
        }
        let mut jitter = reg.jitter;
        while jitter > 0.0 && jitter <= MAX_JITTER * (1.0 + 1e-9) {
            let mut inflated = sigma.clone();
            linalg::add_to_diagonal(&mut inflated, d, jitter * scale);
            if let Some(f) = Cholesky::factor(&inflated, d, min_pivot) {
                return Ok(Factored {
                    reg: *reg,
                    covariance: inflated,
                    factor: Some(f),
                });
            }
            jitter *= 10.0;
        }
        Ok(Factored {
            reg: *reg,
            covariance: sigma,
            factor: None,
        })
    }

    fn with_factored<T>(
        &self,
        reg: &RegularizationConfig,
        f: impl FnOnce(&Factored) -> T,
    ) -> Result<T, EstimatorError> {
        if let Some(cached) = self.cache.get() {
            if cached.reg == *reg {
                return Ok(f(cached));
            }
            return Ok(f(&self.factored(reg)?));
        }
        let fresh = self.factored(reg)?;
        let out = f(&fresh);
        let _ = self.cache.set(fresh);
        Ok(out)
    }

    /// Regularized covariance: shrinkage first, then diagonal jitter if the
    /// factorization needed it.
    pub fn covariance(&self, reg: &RegularizationConfig) -> Result<Vec<f64>, EstimatorError> {
        self.with_factored(reg, |f| f.covariance.clone())
    }

    fn check_query(&self, z: &[f64]) -> Result<(), EstimatorError> {
        self.check(z)?;
        let needed = self.dim as u64 + 1;
        if self.n < needed {
            return Err(EstimatorError::InsufficientSamples {
                needed,
                have: self.n,
            });
        }
        Ok(())
    }

    /// Squared Mahalanobis distance `(z − μ)ᵀ Σ⁻¹ (z − μ)`.
    pub fn mahalanobis_sq(&self, z: &[f64], reg: &RegularizationConfig) -> Result<f64, EstimatorError> {
        self.check_query(z)?;
        let dev: Vec<f64> = z.iter().zip(&self.mu).map(|(z, m)| z - m).collect();
        self.with_factored(reg, |f| f.factor.as_ref().map(|c| c.inv_quad_form(&dev)))?
            .map(|d2| d2.max(0.0))
            .ok_or(EstimatorError::SingularCovariance { max_jitter: MAX_JITTER })
    }

    /// Gaussian log density `−(d/2) log 2π − ½ log|Σ| − ½ d_M²`.
    pub fn log_density(&self, z: &[f64], reg: &RegularizationConfig) -> Result<f64, EstimatorError> {
        self.check_query(z)?;
        let dev: Vec<f64> = z.iter().zip(&self.mu).map(|(z, m)| z - m).collect();
        let d = self.dim as f64;
        self.with_factored(reg, |f| {
            f.factor.as_ref().map(|c| {
                -0.5 * d * (2.0 * std::f64::consts::PI).ln()
                    - 0.5 * c.log_det()
                    - 0.5 * c.inv_quad_form(&dev)
            })
        })?
        .ok_or(EstimatorError::SingularCovariance { max_jitter: MAX_JITTER })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("estimator snapshot serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, EstimatorError> {
        serde_json::from_str(s).map_err(|e| EstimatorError::InvalidSnapshot(e.to_string()))
    }
}

fn shrinkage_weight(sigma: &[f64], dim: usize, n: u64, shrinkage: Shrinkage) -> f64 {
    match shrinkage {
        Shrinkage::Off => 0.0,
        Shrinkage::Fixed(l) => l.clamp(0.0, 1.0),
        Shrinkage::Analytic => {
            // Chen, Wiesel, Eldar & Hero (2010), with S normalized by n.
            let nf = n as f64;
            let p = dim as f64;
            let to_mle = (nf - 1.0) / nf;
            let tr = linalg::trace(sigma, dim) * to_mle;
            let tr_sq: f64 = sigma.iter().map(|v| (v * to_mle).powi(2)).sum();
            let num = (nf - 2.0) / nf * tr_sq + tr * tr;
            let den = (nf + 2.0) * (tr_sq - tr * tr / p);
            if den <= 0.0 {
                1.0
            } else {
                (num / den).clamp(0.0, 1.0)
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    n: u64,
    mu: Vec<f64>,
    comoment: Vec<Vec<f64>>,
    dim: usize,
}

impl From<EstimatorState> for Snapshot {
    fn from(s: EstimatorState) -> Self {
        Snapshot {
            n: s.n,
            comoment: linalg::to_rows(&s.comoment, s.dim),
            mu: s.mu,
            dim: s.dim,
        }
    }
}

impl TryFrom<Snapshot> for EstimatorState {
    type Error = EstimatorError;

    fn try_from(s: Snapshot) -> Result<Self, Self::Error> {
        if s.dim == 0 {
            return Err(EstimatorError::ZeroDimension);
        }
        if s.mu.len() != s.dim {
            return Err(EstimatorError::InvalidSnapshot(format!(
                "mu has length {}, dim is {}",
                s.mu.len(),
                s.dim
            )));
        }
        let (comoment, d) = linalg::flatten_square(&s.comoment)
            .ok_or_else(|| EstimatorError::InvalidSnapshot("comoment is not square".into()))?;
        if d != s.dim {
            return Err(EstimatorError::InvalidSnapshot(format!(
                "comoment is {d}×{d}, dim is {}",
                s.dim
            )));
        }
        Ok(Self {
            n: s.n,
            dim: s.dim,
            mu: s.mu,
            comoment,
            cache: OnceLock::new(),
        })
    }
}
