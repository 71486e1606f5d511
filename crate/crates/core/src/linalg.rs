//! Small dense helpers for symmetric positive definite matrices.
//!
//! Matrices are stored row-major in a flat `Vec<f64>` of length `dim * dim`.
//! Dimensions in this crate are small (the estimator targets d up to a few
//! dozen), so plain loops beat pulling in a BLAS.

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    /// Factors `a`, failing if any pivot (the diagonal entry before the
    /// square root) is not strictly greater than `min_pivot` or is not finite.
    pub fn factor(a: &[f64], dim: usize, min_pivot: f64) -> Option<Self> {
        debug_assert_eq!(a.len(), dim * dim);
        let mut lower = vec![0.0; dim * dim];
        for j in 0..dim {
            let mut pivot = a[j * dim + j];
            for p in 0..j {
                pivot -= lower[j * dim + p] * lower[j * dim + p];
            }
            if !pivot.is_finite() || pivot <= min_pivot {
                return None;
            }
            let diag = pivot.sqrt();
            lower[j * dim + j] = diag;
            for i in (j + 1)..dim {
                let mut s = a[i * dim + j];
                for p in 0..j {
                    s -= lower[i * dim + p] * lower[j * dim + p];
                }
                lower[i * dim + j] = s / diag;
            }
        }
        Some(Self { dim, lower })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Solves `L y = b` by forward substitution.
    pub fn forward(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for p in 0..i {
                s -= self.lower[i * n + p] * y[p];
            }
            y[i] = s / self.lower[i * n + i];
        }
        y
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut x = self.forward(b);
        for i in (0..n).rev() {
            let mut s = x[i];
            for p in (i + 1)..n {
                s -= self.lower[p * n + i] * x[p];
            }
            x[i] = s / self.lower[i * n + i];
        }
        x
    }

    /// `vᵀ A⁻¹ v`, computed as `‖L⁻¹ v‖²`.
    pub fn inv_quad_form(&self, v: &[f64]) -> f64 {
        self.forward(v).iter().map(|y| y * y).sum()
    }

    /// `log det A = 2 Σ log L_ii`.
    pub fn log_det(&self) -> f64 {
        (0..self.dim)
            .map(|i| self.lower[i * self.dim + i].ln())
            .sum::<f64>()
            * 2.0
    }

    /// `L v`, used to colour standard-normal draws.
    pub fn mul_lower(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim;
        (0..n)
            .map(|i| (0..=i).map(|p| self.lower[i * n + p] * v[p]).sum())
            .collect()
    }
}

pub fn trace(a: &[f64], dim: usize) -> f64 {
    (0..dim).map(|i| a[i * dim + i]).sum()
}

pub fn identity(dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim * dim];
    for i in 0..dim {
        m[i * dim + i] = 1.0;
    }
    m
}

pub fn add_to_diagonal(a: &mut [f64], dim: usize, value: f64) {
    for i in 0..dim {
        a[i * dim + i] += value;
    }
}

/// Converts nested rows into a flat row-major buffer, checking squareness.
pub fn flatten_square(rows: &[Vec<f64>]) -> Option<(Vec<f64>, usize)> {
    let dim = rows.len();
    if rows.iter().any(|r| r.len() != dim) {
        return None;
    }
    Some((rows.iter().flatten().copied().collect(), dim))
}

pub fn to_rows(a: &[f64], dim: usize) -> Vec<Vec<f64>> {
    a.chunks(dim.max(1)).map(<[f64]>::to_vec).collect()
}
