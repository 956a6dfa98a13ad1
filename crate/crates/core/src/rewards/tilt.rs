use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{Reward, RewardKind};
use crate::analytic::{Gaussian, GaussianMixture};
use crate::error::{check_dim, Error, Result};
use crate::numeric::log_sum_exp;
use crate::quadrature::GaussianNodes;

/// Rejection sampling is refused below this acceptance probability.
pub const REJECTION_MIN_ACCEPTANCE: f64 = 1e-4;

const QUAD_RADIUS: f64 = 10.0;

fn quad_nodes_per_axis(d: usize) -> usize {
    if d == 1 {
        2048
    } else {
        301
    }
}

/// `q(x) ∝ p(x)·exp(r(x)/β)` for a Gaussian-mixture base.
///
/// `log_partition` is `log E_p[exp(r/β)]`. Conjugate rewards carry the tilted
/// mixture in `closed_form`; bounded non-conjugate rewards (d ≤ 2) are handled
/// by quadrature and rejection sampling.
#[derive(Debug, Clone)]
pub struct TiltedDistribution {
    base: GaussianMixture,
    reward: Reward,
    closed_form: Option<GaussianMixture>,
    log_partition: f64,
}

pub fn tilt_gm(base: &GaussianMixture, r: &Reward) -> Result<TiltedDistribution> {
    check_dim(base.dim(), r.dim())?;
    let beta = r.beta();
    let shift = r.offset() / beta;
    if r.is_constant() {
        return Ok(TiltedDistribution {
            base: base.clone(),
            reward: r.clone(),
            closed_form: Some(base.clone()),
            log_partition: shift,
        });
    }
    let (closed_form, log_partition) = match r.kind() {
        RewardKind::Linear { a } | RewardKind::LearnedLinear { a_hat: a } => {
            let mut log_w = Vec::with_capacity(base.n_components());
            let mut comps = Vec::with_capacity(base.n_components());
            for (c, lw) in base.components().iter().zip(base.log_weights()) {
                let sa = c.cov() * a;
                log_w.push(lw + a.dot(c.mean()) / beta + a.dot(&sa) / (2.0 * beta * beta));
                comps.push(Gaussian::new(c.mean() + sa / beta, c.cov().clone())?);
            }
            let lz = log_sum_exp(&log_w);
            (Some(GaussianMixture::from_log_weights(log_w, comps)?), lz + shift)
        }
        RewardKind::Quadratic { a, b } => {
            let bq = a / beta;
            let bl = b / beta;
            let mut log_w = Vec::with_capacity(base.n_components());
            let mut comps = Vec::with_capacity(base.n_components());
            for (i, (c, lw)) in base.components().iter().zip(base.log_weights()).enumerate() {
                let (g, log_e) = quadratic_tilt_component(c, &bq, &bl).ok_or_else(|| {
                    Error::Domain(format!(
                        "quadratic tilt: Σ⁻¹ + A/β not positive definite for component {i}"
                    ))
                })?;
                log_w.push(lw + log_e);
                comps.push(g);
            }
            let lz = log_sum_exp(&log_w);
            (Some(GaussianMixture::from_log_weights(log_w, comps)?), lz + shift)
        }
        RewardKind::RbfBump { .. } => {
            let d = base.dim();
            let mut terms = Vec::with_capacity(base.n_components());
            for (c, lw) in base.components().iter().zip(base.log_weights()) {
                let nodes = GaussianNodes::new(c.mean(), &c.chol_l(), quad_nodes_per_axis(d), QUAD_RADIUS)?;
                terms.push(lw + nodes.log_expectation(|x| r.value(x) / beta));
            }
            (None, log_sum_exp(&terms))
        }
    };
    if !log_partition.is_finite() {
        return Err(Error::Numeric(format!("log partition is {log_partition}")));
    }
    Ok(TiltedDistribution {
        base: base.clone(),
        reward: r.clone(),
        closed_form,
        log_partition,
    })
}

/// Tilt one Gaussian by `exp(-½xᵀBx + bᵀx)`: returns the normalized tilted
/// Gaussian and `log E[exp(-½xᵀBx + bᵀx)]`, or `None` when `Σ⁻¹ + B` is not PD.
pub(crate) fn quadratic_tilt_component(
    c: &Gaussian,
    bq: &DMatrix<f64>,
    bl: &DVector<f64>,
) -> Option<(Gaussian, f64)> {
    let d = c.dim();
    let prec = c.chol().inverse();
    let p_new = &prec + bq;
    let p_new = (&p_new + p_new.transpose()) * 0.5;
    let chol = p_new.cholesky()?;
    let cov_new = chol.inverse();
    let eta = &prec * c.mean() + bl;
    let mean_new = chol.solve(&eta);
    let log_det_p_new = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let log_e = 0.5 * (-log_det_p_new - c.log_det()) + 0.5 * eta.dot(&mean_new)
        - 0.5 * c.mean().dot(&c.precision_mul(c.mean()));
    let cov_new = (&cov_new + cov_new.transpose()) * 0.5;
    debug_assert_eq!(cov_new.nrows(), d);
    Some((Gaussian::new(mean_new, cov_new).ok()?, log_e))
}

impl TiltedDistribution {
    pub fn base(&self) -> &GaussianMixture {
        &self.base
    }

    pub fn reward(&self) -> &Reward {
        &self.reward
    }

    pub fn closed_form(&self) -> Option<&GaussianMixture> {
        self.closed_form.as_ref()
    }

    pub fn log_partition(&self) -> f64 {
        self.log_partition
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        if let Some(cf) = &self.closed_form {
            return cf.log_density(x);
        }
        Ok(self.base.log_density(x)? + self.reward.value(x) / self.reward.beta() - self.log_partition)
    }

    pub fn score(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if let Some(cf) = &self.closed_form {
            return cf.score(x);
        }
        Ok(self.base.score(x)? + self.reward.gradient(x) / self.reward.beta())
    }

    /// Acceptance probability of the base-proposal rejection sampler.
    pub fn rejection_acceptance(&self) -> Option<f64> {
        let sup = self.reward.supremum()?;
        Some((self.log_partition - sup / self.reward.beta()).exp())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        if let Some(cf) = &self.closed_form {
            return Ok(cf.sample(rng));
        }
        let acc = self.rejection_acceptance().ok_or_else(|| {
            Error::Unsupported("tilted sampling needs a closed form or a bounded reward".into())
        })?;
        if acc < REJECTION_MIN_ACCEPTANCE {
            return Err(Error::Numeric(format!(
                "rejection sampler acceptance {acc:.3e} below {REJECTION_MIN_ACCEPTANCE:e}"
            )));
        }
        let beta = self.reward.beta();
        let sup = self.reward.supremum().expect("checked above");
        let max_tries = (1000.0 / acc).ceil() as usize;
        for _ in 0..max_tries {
            let x = self.base.sample(rng);
            let u: f64 = rng.random();
            if u.ln() < (self.reward.value(&x) - sup) / beta {
                return Ok(x);
            }
        }
        Err(Error::Numeric("rejection sampler exhausted its attempt budget".into()))
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<DVector<f64>>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    /// `E_q[r]`.
    pub fn expected_reward(&self) -> Result<f64> {
        if let Some(cf) = &self.closed_form {
            return expected_reward(cf, &self.reward);
        }
        let beta = self.reward.beta();
        let d = self.base.dim();
        let mut terms = Vec::new();
        let mut vals = Vec::new();
        for (c, lw) in self.base.components().iter().zip(self.base.log_weights()) {
            let nodes = GaussianNodes::new(c.mean(), &c.chol_l(), quad_nodes_per_axis(d), QUAD_RADIUS)?;
            for (x, lwn) in nodes.points.iter().zip(&nodes.log_weights) {
                let r = self.reward.value(x);
                terms.push(lw + lwn + r / beta);
                vals.push(r);
            }
        }
        let lse = log_sum_exp(&terms);
        Ok(terms.iter().zip(&vals).map(|(t, r)| (t - lse).exp() * r).sum())
    }
}

/// Closed-form `E_p[r]` under a Gaussian mixture.
pub fn expected_reward(gm: &GaussianMixture, r: &Reward) -> Result<f64> {
    check_dim(gm.dim(), r.dim())?;
    let d = gm.dim();
    let mut total = 0.0;
    for (c, w) in gm.components().iter().zip(gm.weights()) {
        let e = match r.kind() {
            RewardKind::Linear { a } | RewardKind::LearnedLinear { a_hat: a } => a.dot(c.mean()),
            RewardKind::Quadratic { a, b } => {
                let m = c.mean();
                -0.5 * ((a * c.cov()).trace() + m.dot(&(a * m))) + b.dot(m)
            }
            RewardKind::RbfBump {
                center,
                width,
                height,
            } => {
                let w2 = width * width;
                let s = c.cov() + DMatrix::<f64>::identity(d, d) * w2;
                let chol = s
                    .cholesky()
                    .ok_or_else(|| Error::Numeric("bump convolution not PD".into()))?;
                let diff = c.mean() - center;
                let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                height * (0.5 * d as f64 * w2.ln() - 0.5 * log_det - 0.5 * diff.dot(&chol.solve(&diff))).exp()
            }
        };
        total += w * e;
    }
    Ok(total + r.offset())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::Prompt;
    use crate::numeric::rng_from_seed;
    use crate::quadrature::trapezoid_1d;

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn standard_normal_linear_tilt() {
        let base = GaussianMixture::from_1d(&[(1.0, 0.0, 1.0)]).unwrap();
        let r = Reward::linear(v1(1.0), 1.0).unwrap();
        let q = tilt_gm(&base, &r).unwrap();
        let cf = q.closed_form().unwrap();
        assert!((cf.components()[0].mean()[0] - 1.0).abs() < 1e-15);
        assert!((cf.components()[0].cov()[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((q.log_partition() - 0.5).abs() < 1e-15);
        let z = trapezoid_1d(-20.0, 20.0, 4096, |x| {
            (-0.5 * x * x + x).exp() / (2.0 * std::f64::consts::PI).sqrt()
        });
        assert!((z.ln() - 0.5).abs() < 1e-10);
    }

    #[test]
    fn infinite_temperature_leaves_base() {
        let base = GaussianMixture::from_1d(&[(0.3, -1.0, 0.5), (0.7, 2.0, 1.5)]).unwrap();
        for r in [
            Reward::linear(v1(2.0), 1e9).unwrap(),
            Reward::quadratic(DMatrix::from_element(1, 1, 1.0), v1(0.5), 1e9).unwrap(),
        ] {
            let cf = tilt_gm(&base, &r).unwrap().closed_form().unwrap().clone();
            for (a, b) in cf.components().iter().zip(base.components()) {
                assert!((a.mean() - b.mean()).amax() < 1e-6);
                assert!((a.cov() - b.cov()).amax() < 1e-6);
            }
            for (a, b) in cf.weights().iter().zip(base.weights()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_reward_is_identity() {
        let base = GaussianMixture::from_1d(&[(0.3, -1.0, 0.5), (0.7, 2.0, 1.5)]).unwrap();
        let q = tilt_gm(&base, &Reward::linear(v1(0.0), 0.7).unwrap()).unwrap();
        let cf = q.closed_form().unwrap();
        assert_eq!(cf.weights(), base.weights());
        for (a, b) in cf.components().iter().zip(base.components()) {
            assert_eq!(a.mean(), b.mean());
            assert_eq!(a.cov(), b.cov());
        }
        assert_eq!(q.log_partition(), 0.0);
    }

    fn quadrature_check(base: &GaussianMixture, r: &Reward, tol: f64) {
        let q = tilt_gm(base, r).unwrap();
        let un = |x: f64| base.log_density(&v1(x)).unwrap().exp() * (r.value(&v1(x)) / r.beta()).exp();
        let (lo, hi) = (-25.0, 25.0);
        let z = trapezoid_1d(lo, hi, 2048 * 8, un);
        assert!((q.log_partition() - z.ln()).abs() < 1e-8, "{} vs {}", q.log_partition(), z.ln());
        let mass = trapezoid_1d(lo, hi, 2048 * 8, |x| q.log_density(&v1(x)).unwrap().exp());
        assert!((mass - 1.0).abs() < 1e-8);
        let h = (hi - lo) / 2047.0;
        let mut sup: f64 = 0.0;
        for i in 0..2048 {
            let x = lo + h * i as f64;
            let exact = q.log_density(&v1(x)).unwrap().exp();
            sup = sup.max((exact - un(x) / z).abs());
        }
        assert!(sup < tol, "sup-norm {sup}");
    }

    #[test]
    fn linear_tilt_matches_quadrature() {
        let base = GaussianMixture::from_1d(&[(0.4, -2.0, 0.3), (0.6, 1.0, 0.8)]).unwrap();
        quadrature_check(&base, &Reward::linear(v1(1.3), 0.8).unwrap(), 1e-7);
    }

    #[test]
    fn quadratic_tilt_matches_quadrature() {
        let base = GaussianMixture::from_1d(&[(0.5, -3.0, 0.25), (0.5, 3.0, 0.25)]).unwrap();
        let r = Reward::quadratic(DMatrix::from_element(1, 1, 1.0), v1(2.0), 1.0).unwrap();
        quadrature_check(&base, &r, 1e-7);
        // negative curvature is fine as long as the updated precision stays PD
        let r = Reward::quadratic(DMatrix::from_element(1, 1, -1.0), v1(0.0), 1.0).unwrap();
        quadrature_check(&base, &r, 1e-7);
        let bad = Reward::quadratic(DMatrix::from_element(1, 1, -10.0), v1(0.0), 1.0).unwrap();
        assert!(matches!(tilt_gm(&base, &bad), Err(Error::Domain(_))));
    }

    #[test]
    fn bump_tilt_by_quadrature() {
        let base = GaussianMixture::from_1d(&[(0.5, -1.0, 0.5), (0.5, 1.5, 0.4)]).unwrap();
        let r = Reward::rbf_bump(v1(1.0), 0.6, 2.0, 0.5).unwrap();
        quadrature_check(&base, &r, 1e-7);
        let q = tilt_gm(&base, &r).unwrap();
        assert!(q.closed_form().is_none());
        let acc = q.rejection_acceptance().unwrap();
        assert!(acc > 0.0 && acc <= 1.0);
    }

    #[test]
    fn rejection_sampler_moments() {
        let base = GaussianMixture::from_1d(&[(0.5, -1.0, 0.5), (0.5, 1.5, 0.4)]).unwrap();
        let r = Reward::rbf_bump(v1(1.0), 0.6, 2.0, 0.5).unwrap();
        let q = tilt_gm(&base, &r).unwrap();
        let mut rng = rng_from_seed(3);
        let n = 20_000;
        let xs = q.sample_n(&mut rng, n).unwrap();
        let m = xs.iter().map(|x| x[0]).sum::<f64>() / n as f64;
        let un = |x: f64| q.log_density(&v1(x)).unwrap().exp();
        let mean = trapezoid_1d(-15.0, 15.0, 8192, |x| x * un(x));
        let var = trapezoid_1d(-15.0, 15.0, 8192, |x| (x - mean).powi(2) * un(x));
        assert!((m - mean).abs() < 3.0 * (var / n as f64).sqrt(), "{m} vs {mean}");
    }

    #[test]
    fn rejection_refuses_tiny_acceptance() {
        let base = GaussianMixture::from_1d(&[(1.0, 0.0, 1.0)]).unwrap();
        let r = Reward::rbf_bump(v1(8.0), 0.1, 10.0, 0.5).unwrap();
        let q = tilt_gm(&base, &r).unwrap();
        assert!(q.rejection_acceptance().unwrap() < REJECTION_MIN_ACCEPTANCE);
        assert!(q.sample(&mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn expected_reward_closed_forms() {
        let base = GaussianMixture::new(
            vec![0.3, 0.7],
            vec![DVector::from_vec(vec![1.0, -1.0]), DVector::from_vec(vec![0.0, 2.0])],
            vec![
                DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
                DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.2]),
            ],
        )
        .unwrap();
        let rewards = [
            Reward::linear(DVector::from_vec(vec![0.5, -1.0]), 1.0).unwrap(),
            Reward::quadratic(
                DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]),
                DVector::from_vec(vec![0.3, 0.1]),
                1.0,
            )
            .unwrap(),
            Reward::rbf_bump(DVector::from_vec(vec![0.5, 0.5]), 0.7, 1.5, 1.0).unwrap(),
        ];
        for r in &rewards {
            let exact = expected_reward(&base, r).unwrap();
            let mut lse_terms = Vec::new();
            let mut vals = Vec::new();
            for (c, lw) in base.components().iter().zip(base.log_weights()) {
                let nodes = GaussianNodes::new(c.mean(), &c.chol_l(), 301, 10.0).unwrap();
                for (x, l) in nodes.points.iter().zip(&nodes.log_weights) {
                    lse_terms.push(lw + l);
                    vals.push(r.eval(x, Prompt(0)).unwrap());
                }
            }
            let quad: f64 = lse_terms.iter().zip(&vals).map(|(l, v)| l.exp() * v).sum();
            assert!((exact - quad).abs() < 1e-8, "{exact} vs {quad}");
        }
    }

    #[test]
    fn stronger_tilt_raises_expected_reward() {
        let base = GaussianMixture::from_1d(&[(0.5, -3.0, 0.25), (0.5, 3.0, 0.25)]).unwrap();
        let betas = [0.25, 0.5, 1.0, 2.0, 4.0];
        let vals: Vec<f64> = betas
            .iter()
            .map(|b| {
                let r = Reward::linear(v1(1.0), *b).unwrap();
                tilt_gm(&base, &r).unwrap().expected_reward().unwrap()
            })
            .collect();
        assert!(vals.windows(2).all(|w| w[0] >= w[1]), "{vals:?}");
        let unguided = expected_reward(&base, &Reward::linear(v1(1.0), 1.0).unwrap()).unwrap();
        assert!(vals[4] > unguided);
    }
}
