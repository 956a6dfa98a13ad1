use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance-preserving schedule with linear `β(t)`.
///
/// `α_t = exp(-½∫β)`, `σ_t² = 1 - α_t²`, forward SDE drift `f = -½β(t)x` and
/// diffusion `g = √β(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub horizon: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
            horizon: 1.0,
        }
    }
}

impl NoiseSchedule {
    pub fn new(beta_min: f64, beta_max: f64, horizon: f64) -> Result<Self> {
        let s = Self {
            beta_min,
            beta_max,
            horizon,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.beta_min.is_finite()
            && self.beta_max.is_finite()
            && self.horizon.is_finite()
            && self.beta_min > 0.0
            && self.beta_max >= self.beta_min
            && self.horizon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!(
                "invalid schedule: beta_min={}, beta_max={}, horizon={}",
                self.beta_min, self.beta_max, self.horizon
            )))
        }
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if t.is_finite() && (0.0..=self.horizon).contains(&t) {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "t={t} outside [0, {}]",
                self.horizon
            )))
        }
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + (t / self.horizon) * (self.beta_max - self.beta_min)
    }

    /// `∫_0^t β(s) ds`.
    pub fn integrated_beta(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t / self.horizon
    }

    pub fn log_alpha(&self, t: f64) -> f64 {
        -0.5 * self.integrated_beta(t)
    }

    pub fn alpha(&self, t: f64) -> f64 {
        self.log_alpha(t).exp()
    }

    pub fn sigma2(&self, t: f64) -> f64 {
        -(2.0 * self.log_alpha(t)).exp_m1()
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma2(t).sqrt()
    }

    /// Drift coefficient of the forward SDE.
    pub fn drift(&self, x: &nalgebra::DVector<f64>, t: f64) -> nalgebra::DVector<f64> {
        x * (-0.5 * self.beta(t))
    }

    pub fn diffusion(&self, t: f64) -> f64 {
        self.beta(t).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_values() {
        let s = NoiseSchedule::default();
        assert_eq!(s.alpha(0.0), 1.0);
        assert_eq!(s.sigma(0.0), 0.0);
        // α_T = exp(-¼(β_max-β_min) - ½β_min) at T = 1
        let expected = (-0.25 * 19.9 - 0.05f64).exp();
        assert!((s.alpha(1.0) - expected).abs() < 1e-15);
    }

    #[test]
    fn variance_preserving_on_grid() {
        let s = NoiseSchedule::default();
        for i in 0..100 {
            let t = i as f64 / 99.0;
            let (a, sg) = (s.alpha(t), s.sigma(t));
            assert!((a * a + sg * sg - 1.0).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn monotone() {
        let s = NoiseSchedule::default();
        let mut prev = (s.alpha(0.0), s.sigma(0.0));
        for i in 1..=200 {
            let t = i as f64 / 200.0;
            let cur = (s.alpha(t), s.sigma(t));
            assert!(cur.0 < prev.0 && cur.1 > prev.1);
            prev = cur;
        }
    }

    // Moments of dx = f dt + g dw from a point mass x0: m' = -½βm, v' = -βv + β.
    // RK4 integration must reproduce (α_t x0, σ_t²).
    #[test]
    fn drift_and_diffusion_reproduce_kernel() {
        let s = NoiseSchedule::default();
        let x0 = 1.7;
        let rhs = |t: f64, m: f64, v: f64| (-0.5 * s.beta(t) * m, -s.beta(t) * v + s.beta(t));
        let n = 20_000;
        let h = 1.0 / n as f64;
        let (mut m, mut v) = (x0, 0.0);
        for k in 0..n {
            let t = k as f64 * h;
            let k1 = rhs(t, m, v);
            let k2 = rhs(t + h / 2.0, m + h / 2.0 * k1.0, v + h / 2.0 * k1.1);
            let k3 = rhs(t + h / 2.0, m + h / 2.0 * k2.0, v + h / 2.0 * k2.1);
            let k4 = rhs(t + h, m + h * k3.0, v + h * k3.1);
            m += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            v += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
            if (k + 1) % 2000 == 0 {
                let tt = (k + 1) as f64 * h;
                assert!((m - s.alpha(tt) * x0).abs() < 1e-10);
                assert!((v - s.sigma2(tt)).abs() < 1e-10);
            }
        }
        // the drift/diffusion accessors agree with β
        let x = nalgebra::DVector::from_vec(vec![2.0]);
        assert!((s.drift(&x, 0.5)[0] + s.beta(0.5)).abs() < 1e-15);
        assert!((s.diffusion(0.5).powi(2) - s.beta(0.5)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::new(0.0, 20.0, 1.0).is_err());
        assert!(NoiseSchedule::new(1.0, 0.5, 1.0).is_err());
        assert!(NoiseSchedule::default().check_time(1.5).is_err());
    }
}
