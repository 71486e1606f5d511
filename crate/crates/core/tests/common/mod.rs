//! Reference computations shared by the integration tests. Nothing here
//! calls into the estimator or metrics code it is used to check.
#![allow(dead_code)]

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn normal(rng: &mut StdRng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// `d`-dimensional points `A·g + b` with random `A`, `b` and Gaussian `g`.
pub fn correlated_points(rng: &mut StdRng, d: usize, n: usize, offset_scale: f64) -> Vec<Vec<f64>> {
    let a: Vec<f64> = (0..d * d)
        .map(|i| if i % (d + 1) == 0 { 1.0 + rng.gen::<f64>() * 3.0 } else { rng.gen::<f64>() - 0.5 })
        .collect();
    let b: Vec<f64> = (0..d).map(|_| (rng.gen::<f64>() - 0.5) * offset_scale).collect();
    (0..n)
        .map(|_| {
            let g: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
            (0..d)
                .map(|i| b[i] + (0..d).map(|j| a[i * d + j] * g[j]).sum::<f64>())
                .collect()
        })
        .collect()
}

/// Two-pass mean and unbiased covariance (row-major).
pub fn batch_mean_cov(points: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = points.len();
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for p in points {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (p[i] - mean[i]) * (p[j] - mean[j]);
            }
        }
    }
    for c in &mut cov {
        *c /= (n - 1) as f64;
    }
    (mean, cov)
}

/// `‖a − b‖ / ‖b‖` in the Euclidean (Frobenius) norm.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}

pub fn dmatrix(a: &[f64], d: usize) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_slice(d, d, a)
}

/// `(z − μ)ᵀ Σ⁻¹ (z − μ)` through a dense LU inverse.
pub fn dense_mahalanobis_sq(cov: &[f64], mean: &[f64], z: &[f64]) -> f64 {
    let d = mean.len();
    let inv = dmatrix(cov, d).try_inverse().expect("invertible");
    let dev = nalgebra::DVector::from_iterator(d, z.iter().zip(mean).map(|(a, b)| a - b));
    (dev.transpose() * inv * &dev)[(0, 0)]
}

pub fn dense_log_density(cov: &[f64], mean: &[f64], z: &[f64]) -> f64 {
    let d = mean.len();
    let det = dmatrix(cov, d).determinant();
    -0.5 * d as f64 * std::f64::consts::TAU.ln() - 0.5 * det.ln() - 0.5 * dense_mahalanobis_sq(cov, mean, z)
}

/// Expected number of retained samples for a 2-D standard Gaussian stream
/// of length `t`, averaged over `seeds` Monte-Carlo replications. Uses the
/// per-step acceptance probability instead of a Bernoulli draw. The belief
/// includes the current sample; every step below `floor` samples accepts.
pub fn mc_expected_yield(t: usize, seeds: u64, floor: u64, psi: impl Fn(f64, u64) -> f64) -> (f64, f64) {
    let mut totals = Vec::new();
    for seed in 0..seeds {
        let mut r = rng(0xC4 + seed);
        let (mut s1, mut s2) = ([0.0f64; 2], [0.0f64; 3]);
        let mut total = 0.0;
        for k in 0..t {
            let z = [normal(&mut r), normal(&mut r)];
            s1[0] += z[0];
            s1[1] += z[1];
            s2[0] += z[0] * z[0];
            s2[1] += z[0] * z[1];
            s2[2] += z[1] * z[1];
            let n = (k + 1) as u64;
            if n < floor {
                total += 1.0;
                continue;
            }
            let nf = n as f64;
            let m = [s1[0] / nf, s1[1] / nf];
            let c = |sxx: f64, mx: f64, my: f64| (sxx - nf * mx * my) / (nf - 1.0);
            let (a, b, d) = (c(s2[0], m[0], m[0]), c(s2[1], m[0], m[1]), c(s2[2], m[1], m[1]));
            let det = a * d - b * b;
            let (x, y) = (z[0] - m[0], z[1] - m[1]);
            let d_sq = (d * x * x - 2.0 * b * x * y + a * y * y) / det;
            total += psi(d_sq, n);
        }
        totals.push(total);
    }
    let mean = totals.iter().sum::<f64>() / totals.len() as f64;
    let var = totals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (totals.len() - 1) as f64;
    (mean, var.sqrt())
}
