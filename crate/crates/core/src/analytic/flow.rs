use nalgebra::DVector;

use super::{GaussianMixture, ObservationPosterior};
use crate::error::{check_dim, Error, Result};

/// Largest admissible distance from `t = 1` for analytic flow quantities.
pub const FLOW_T_CLAMP: f64 = 1e-4;

/// Linear interpolation path `x_t = (1-t)x₀ + t·x₁`, `x₀ ~ N(0, I)`.
///
/// Noise sits at `t = 0` and data at `t = 1`, the reverse of the diffusion
/// convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowPath {
    pub dim: usize,
}

impl FlowPath {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    pub fn check_time(t: f64, clamp: f64) -> Result<()> {
        if t.is_finite() && t >= 0.0 && t < 1.0 - clamp {
            Ok(())
        } else {
            Err(Error::Domain(format!("flow time t={t} outside [0, 1-{clamp})")))
        }
    }

    pub fn interpolate(&self, x0: &DVector<f64>, x1: &DVector<f64>, t: f64) -> DVector<f64> {
        x0 * (1.0 - t) + x1 * t
    }

    /// `v_t(x_t | x₁) = (x₁ - x_t)/(1 - t)`.
    pub fn conditional_velocity(&self, x_t: &DVector<f64>, x1: &DVector<f64>, t: f64) -> DVector<f64> {
        (x1 - x_t) / (1.0 - t)
    }
}

/// Posterior `p(x₁ | x_t)` under the path kernel `N(t·x₁, (1-t)² I)`.
pub fn fm_posterior(gm: &GaussianMixture, t: f64) -> Result<ObservationPosterior> {
    FlowPath::check_time(t, FLOW_T_CLAMP)?;
    ObservationPosterior::new(gm, t, 1.0 - t)
}

/// Marginal velocity `E[x₁ - x_t | x_t]/(1 - t)`.
pub fn fm_marginal_velocity(gm: &GaussianMixture, t: f64, x_t: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(gm.dim(), x_t.len())?;
    let post = fm_posterior(gm, t)?;
    let st = post.state(x_t)?;
    Ok((st.posterior_mean() - x_t) / (1.0 - t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{log_sum_exp, rng_from_seed};
    use rand_distr::{Distribution, StandardNormal};

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn symmetric_data_has_zero_velocity_at_origin() {
        let gm = GaussianMixture::from_1d(&[(0.5, -2.0, 0.5), (0.5, 2.0, 0.5)]).unwrap();
        for t in [0.0, 0.3, 0.9] {
            assert!(fm_marginal_velocity(&gm, t, &v1(0.0)).unwrap()[0].abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_times_near_one() {
        let gm = GaussianMixture::from_1d(&[(1.0, 0.0, 1.0)]).unwrap();
        assert!(fm_marginal_velocity(&gm, 1.0 - 0.5 * FLOW_T_CLAMP, &v1(0.0)).is_err());
        assert!(fm_marginal_velocity(&gm, -0.1, &v1(0.0)).is_err());
        assert!(fm_marginal_velocity(&gm, 0.99, &v1(0.0)).is_ok());
    }

    #[test]
    fn single_gaussian_velocity_matches_weighted_monte_carlo() {
        // self-normalized average of conditional velocities with x₁ ~ data,
        // weighted by the path likelihood of the fixed x_t
        let (mu, var) = (1.5, 0.6);
        let gm = GaussianMixture::from_1d(&[(1.0, mu, var)]).unwrap();
        let path = FlowPath::new(1);
        let mut rng = rng_from_seed(11);
        let t = 0.4;
        for xt in [-0.5, 0.3, 1.2] {
            let xt_v = v1(xt);
            let n = 100_000;
            let x1s: Vec<f64> = (0..n).map(|_| gm.sample(&mut rng)[0]).collect();
            let logw: Vec<f64> = x1s
                .iter()
                .map(|x1| -(xt - t * x1).powi(2) / (2.0 * (1.0 - t) * (1.0 - t)))
                .collect();
            let lse = log_sum_exp(&logw);
            let w: Vec<f64> = logw.iter().map(|l| (l - lse).exp()).collect();
            let vs: Vec<f64> = x1s
                .iter()
                .map(|x1| path.conditional_velocity(&xt_v, &v1(*x1), t)[0])
                .collect();
            let est: f64 = w.iter().zip(&vs).map(|(w, v)| w * v).sum();
            let se = w
                .iter()
                .zip(&vs)
                .map(|(w, v)| w * w * (v - est).powi(2))
                .sum::<f64>()
                .sqrt();
            let exact = fm_marginal_velocity(&gm, t, &xt_v).unwrap()[0];
            assert!((est - exact).abs() < 3.0 * se, "xt={xt}: {est} vs {exact} (se {se})");
        }
    }

    #[test]
    fn euler_transport_reproduces_data_moments() {
        let gm = GaussianMixture::from_1d(&[(0.3, -1.0, 0.4), (0.7, 1.5, 0.3)]).unwrap();
        let mut rng = rng_from_seed(5);
        let n = 4000;
        let steps = 400;
        let t_end = 1.0 - 1e-3;
        let dt = t_end / steps as f64;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            let mut x = v1(z);
            for k in 0..steps {
                let t = k as f64 * dt;
                x += fm_marginal_velocity(&gm, t, &x).unwrap() * dt;
            }
            x += fm_marginal_velocity(&gm, t_end, &x).unwrap() * (1.0 - t_end);
            out.push(x[0]);
        }
        let m = out.iter().sum::<f64>() / n as f64;
        let v = out.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let (tm, tv) = (gm.mean()[0], gm.covariance()[(0, 0)]);
        let m4 = gm
            .components()
            .iter()
            .zip(gm.weights())
            .map(|(c, w)| {
                let (mu, s2) = (c.mean()[0] - tm, c.cov()[(0, 0)]);
                w * (mu.powi(4) + 6.0 * mu * mu * s2 + 3.0 * s2 * s2)
            })
            .sum::<f64>();
        assert!((m - tm).abs() < 3.0 * (tv / n as f64).sqrt(), "mean {m} vs {tm}");
        let var_se = ((m4 - tv * tv) / n as f64).sqrt();
        assert!((v - tv).abs() < 3.0 * var_se, "var {v} vs {tv}");
    }
}
