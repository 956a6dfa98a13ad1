//! Tensor-product trapezoid rules for d ≤ 2.
//!
//! Integrals against a Gaussian are done in whitened coordinates
//! `x = m + L z`, where the trapezoid rule converges spectrally for smooth
//! integrands.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;

pub const MAX_QUADRATURE_DIM: usize = 2;

pub fn trapezoid_1d(a: f64, b: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    assert!(n >= 2);
    let h = (b - a) / (n - 1) as f64;
    let mut s = 0.0;
    for i in 0..n {
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        s += w * f(a + h * i as f64);
    }
    s * h
}

pub fn trapezoid_2d(
    (ax, bx): (f64, f64),
    (ay, by): (f64, f64),
    n: usize,
    f: impl Fn(f64, f64) -> f64,
) -> f64 {
    assert!(n >= 2);
    let hx = (bx - ax) / (n - 1) as f64;
    let hy = (by - ay) / (n - 1) as f64;
    let mut s = 0.0;
    for i in 0..n {
        let wi = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        let x = ax + hx * i as f64;
        for j in 0..n {
            let wj = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
            s += wi * wj * f(x, ay + hy * j as f64);
        }
    }
    s * hx * hy
}

/// Node set `{(x_k, log w_k)}` such that `Σ_k w_k f(x_k) ≈ E_{N(m, LLᵀ)}[f]`.
#[derive(Debug, Clone)]
pub struct GaussianNodes {
    pub points: Vec<DVector<f64>>,
    pub log_weights: Vec<f64>,
}

impl GaussianNodes {
    /// `n` nodes per axis over `[-radius, radius]` in whitened coordinates.
    pub fn new(mean: &DVector<f64>, chol_l: &DMatrix<f64>, n: usize, radius: f64) -> Result<Self> {
        let d = mean.len();
        if d == 0 || d > MAX_QUADRATURE_DIM {
            return Err(Error::Unsupported(format!(
                "quadrature is only defined for d ≤ {MAX_QUADRATURE_DIM} (got d={d})"
            )));
        }
        let n = n.max(3);
        let h = 2.0 * radius / (n - 1) as f64;
        let axis: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let z = -radius + h * i as f64;
                let w = if i == 0 || i == n - 1 { 0.5 * h } else { h };
                (z, w.ln() - 0.5 * z * z - 0.5 * (2.0 * PI).ln())
            })
            .collect();
        let mut points = Vec::with_capacity(n.pow(d as u32));
        let mut log_weights = Vec::with_capacity(points.capacity());
        if d == 1 {
            for &(z, lw) in &axis {
                points.push(mean + chol_l * DVector::from_element(1, z));
                log_weights.push(lw);
            }
        } else {
            for &(z1, lw1) in &axis {
                for &(z2, lw2) in &axis {
                    points.push(mean + chol_l * DVector::from_vec(vec![z1, z2]));
                    log_weights.push(lw1 + lw2);
                }
            }
        }
        Ok(Self {
            points,
            log_weights,
        })
    }

    /// `log E[exp(g(x))]` for a log-integrand `g`.
    pub fn log_expectation(&self, g: impl Fn(&DVector<f64>) -> f64) -> f64 {
        let terms: Vec<f64> = self
            .points
            .iter()
            .zip(&self.log_weights)
            .map(|(x, lw)| lw + g(x))
            .collect();
        log_sum_exp(&terms)
    }

    /// `(log E[exp g], E[x exp g] / E[exp g])`.
    pub fn tilted_moments(&self, g: impl Fn(&DVector<f64>) -> f64) -> (f64, DVector<f64>) {
        let terms: Vec<f64> = self
            .points
            .iter()
            .zip(&self.log_weights)
            .map(|(x, lw)| lw + g(x))
            .collect();
        let lse = log_sum_exp(&terms);
        let mut m = DVector::zeros(self.points[0].len());
        for (x, t) in self.points.iter().zip(&terms) {
            m += x * (t - lse).exp();
        }
        (lse, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trapezoid_integrates_gaussians() {
        let v = trapezoid_1d(-12.0, 12.0, 2048, |x| (-0.5 * x * x).exp() / (2.0 * PI).sqrt());
        assert!((v - 1.0).abs() < 1e-12);
        let v2 = trapezoid_2d((-10.0, 10.0), (-10.0, 10.0), 301, |x, y| {
            (-0.5 * (x * x + y * y)).exp() / (2.0 * PI)
        });
        assert!((v2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_nodes_reproduce_mgf() {
        // E[exp(c x)] for x ~ N(m, s²) is exp(cm + c²s²/2)
        let (m, s, c) = (0.4, 1.3, 0.7);
        let nodes = GaussianNodes::new(
            &DVector::from_element(1, m),
            &DMatrix::from_element(1, 1, s),
            201,
            12.0,
        )
        .unwrap();
        let lse = nodes.log_expectation(|x| c * x[0]);
        assert!((lse - (c * m + 0.5 * c * c * s * s)).abs() < 1e-12);
        let (_, mean) = nodes.tilted_moments(|x| c * x[0]);
        assert!((mean[0] - (m + c * s * s)).abs() < 1e-11);
    }

    #[test]
    fn rejects_high_dimension() {
        let r = GaussianNodes::new(&DVector::zeros(3), &DMatrix::identity(3, 3), 11, 5.0);
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }
}
