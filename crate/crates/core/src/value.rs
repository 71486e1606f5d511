//! Value functions: map the current belief and a query embedding to an
//! acceptance probability ψ ∈ [0, 1].

use serde::{Deserialize, Serialize};

use crate::estimator::{EstimatorError, EstimatorState, RegularizationConfig};

pub const DEFAULT_NU: u64 = 50;

/// Root of `(r²/2)·exp(−r²/2) = 0.146_166…` above the mode, so that a 2-D
/// Gaussian stream yields about 14.6% acceptances once warmed up.
pub const DEFAULT_R_MAX_SQ: f64 = 6.064_687_026_134_2;

/// Floor for the accept-all phase; the effective floor is `max(d + 2, this)`.
pub const DEFAULT_WARMUP_MIN_SAMPLES: u64 = 25;

/// `1 − min(1, n/ν)·exp(−d²/2)`.
pub fn psi_complementary(d_sq: f64, n: u64, nu: u64) -> f64 {
    debug_assert!(d_sq >= 0.0 && nu >= 1);
    let kappa = (n as f64 / nu as f64).min(1.0);
    (1.0 - kappa * (-0.5 * d_sq).exp()).clamp(0.0, 1.0)
}

/// `exp((d² − r²_max)/2)` inside the Mahalanobis ellipse, zero outside.
pub fn psi_reciprocal(d_sq: f64, r_max_sq: f64) -> f64 {
    debug_assert!(d_sq >= 0.0);
    if d_sq <= r_max_sq {
        (0.5 * (d_sq - r_max_sq)).exp().min(1.0)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ValueFunction {
    /// Complementary Gaussian with warm-up denominator ν.
    Complementary {
        #[serde(default = "default_nu")]
        nu: u64,
    },
    /// Reciprocal Gaussian targeting a uniform law over `d² ≤ r²_max`.
    Reciprocal {
        #[serde(default = "default_r_max_sq")]
        r_max_sq: f64,
    },
    /// Accept everything.
    OpenLoop,
    /// Accept with a constant probability. A missing rate is resolved by
    /// `compare` from the feedback runs it is paired with.
    RandomRate {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rate: Option<f64>,
    },
}

fn default_nu() -> u64 {
    DEFAULT_NU
}

fn default_r_max_sq() -> f64 {
    DEFAULT_R_MAX_SQ
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    #[serde(flatten)]
    pub value: ValueFunction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_min_samples: Option<u64>,
}

impl PolicyConfig {
    pub fn new(value: ValueFunction) -> Self {
        Self {
            value,
            warmup_min_samples: None,
        }
    }

    pub fn complementary(nu: u64) -> Self {
        Self::new(ValueFunction::Complementary { nu })
    }

    pub fn reciprocal(r_max_sq: f64) -> Self {
        Self::new(ValueFunction::Reciprocal { r_max_sq })
    }

    pub fn open_loop() -> Self {
        Self::new(ValueFunction::OpenLoop)
    }

    pub fn random_rate(rate: f64) -> Self {
        Self::new(ValueFunction::RandomRate { rate: Some(rate) })
    }

    /// Number of samples below which every variant accepts unconditionally.
    pub fn warmup_floor(&self, dim: usize) -> u64 {
        let d_floor = dim as u64 + 2;
        d_floor.max(self.warmup_min_samples.unwrap_or(DEFAULT_WARMUP_MIN_SAMPLES))
    }

    pub fn is_feedback(&self) -> bool {
        matches!(
            self.value,
            ValueFunction::Complementary { .. } | ValueFunction::Reciprocal { .. }
        )
    }

    pub fn name(&self) -> &'static str {
        match self.value {
            ValueFunction::Complementary { .. } => "complementary",
            ValueFunction::Reciprocal { .. } => "reciprocal",
            ValueFunction::OpenLoop => "open_loop",
            ValueFunction::RandomRate { .. } => "random_rate",
        }
    }

    /// Every violated constraint, as human-readable messages. `require_rate`
    /// makes a missing random rate an error.
    pub fn violations(&self, require_rate: bool) -> Vec<String> {
        let mut out = Vec::new();
        match self.value {
            ValueFunction::Complementary { nu } if nu < 1 => {
                out.push(format!("nu ≥ 1 required, got {nu}"));
            }
            ValueFunction::Reciprocal { r_max_sq } if !(r_max_sq > 0.0 && r_max_sq.is_finite()) => {
                out.push(format!("r_max_sq > 0 required, got {r_max_sq}"));
            }
            ValueFunction::RandomRate { rate: Some(rate) } if !(0.0..=1.0).contains(&rate) => {
                out.push(format!("rate ∈ [0,1] required, got {rate}"));
            }
            ValueFunction::RandomRate { rate: None } if require_rate => {
                out.push("rate ∈ [0,1] required for random_rate".to_string());
            }
            _ => {}
        }
        out
    }
}

/// ψ together with the squared distance it was derived from, if any.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub psi: f64,
    pub d_sq: Option<f64>,
}

impl Evaluation {
    fn accept_all() -> Self {
        Self { psi: 1.0, d_sq: None }
    }
}

/// Dispatches on the policy variant. During warm-up every variant returns
/// `ψ = 1` without touching the covariance.
pub fn evaluate(
    config: &PolicyConfig,
    state: &EstimatorState,
    z: &[f64],
    reg: &RegularizationConfig,
) -> Result<Evaluation, EstimatorError> {
    if state.n() < config.warmup_floor(state.dim()) {
        return Ok(Evaluation::accept_all());
    }
    match config.value {
        ValueFunction::OpenLoop => Ok(Evaluation::accept_all()),
        ValueFunction::RandomRate { rate } => Ok(Evaluation {
            psi: rate.unwrap_or(1.0),
            d_sq: None,
        }),
        ValueFunction::Complementary { nu } => {
            let d_sq = state.mahalanobis_sq(z, reg)?;
            Ok(Evaluation {
                psi: psi_complementary(d_sq, state.n(), nu),
                d_sq: Some(d_sq),
            })
        }
        ValueFunction::Reciprocal { r_max_sq } => {
            let d_sq = state.mahalanobis_sq(z, reg)?;
            Ok(Evaluation {
                psi: psi_reciprocal(d_sq, r_max_sq),
                d_sq: Some(d_sq),
            })
        }
    }
}
