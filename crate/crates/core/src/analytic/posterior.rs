use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{Gaussian, GaussianMixture, NoiseSchedule};
use crate::error::{check_dim, Error, Result};
use crate::numeric::log_sum_exp;

/// Per-component pieces of the conjugate update against `y = s·x + τ·ε`.
///
/// With `S = s²Σ + τ²I` (which commutes with `Σ`): gain `K = sΣS⁻¹`,
/// posterior covariance `C = τ²ΣS⁻¹`, posterior mean `μ + K(y - sμ)`.
#[derive(Debug, Clone)]
pub struct PosteriorComponent {
    pub prior_mean: DVector<f64>,
    pub log_weight: f64,
    pub obs_mean: DVector<f64>,
    obs_chol: Cholesky<f64, Dyn>,
    obs_log_det: f64,
    pub gain: DMatrix<f64>,
    pub cov: Gaussian,
}

impl PosteriorComponent {
    /// `log N(y; sμ, S)`.
    pub fn log_evidence(&self, y: &DVector<f64>) -> f64 {
        let diff = y - &self.obs_mean;
        let z = self
            .obs_chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .expect("positive diagonal");
        -0.5 * (y.len() as f64 * (2.0 * PI).ln() + self.obs_log_det + z.norm_squared())
    }

    /// `∇_y log N(y; sμ, S)`.
    pub fn evidence_score(&self, y: &DVector<f64>) -> DVector<f64> {
        -self.obs_chol.solve(&(y - &self.obs_mean))
    }

    pub fn mean_at(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.prior_mean + &self.gain * (y - &self.obs_mean)
    }

    /// Posterior covariance `C` (as a zero-mean Gaussian carrying its factor).
    pub fn covariance(&self) -> &DMatrix<f64> {
        self.cov.cov()
    }
}

/// Exact Gaussian-mixture posterior for a linear-Gaussian observation channel.
/// Serves both the diffusion kernel (`s = α_t`, `τ = σ_t`) and the flow path
/// (`s = t`, `τ = 1 - t`).
#[derive(Debug, Clone)]
pub struct ObservationPosterior {
    scale: f64,
    noise_sd: f64,
    dim: usize,
    components: Vec<PosteriorComponent>,
}

/// Posterior evaluated at one observation.
#[derive(Debug, Clone)]
pub struct PosteriorState {
    pub log_resp: Vec<f64>,
    pub resp: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    /// Per-component evidence scores `∇_y log N(y; sμ_i, S_i)`.
    pub comp_scores: Vec<DVector<f64>>,
    /// Marginal score `∇_y log p(y)`.
    pub score: DVector<f64>,
    pub log_marginal: f64,
}

impl PosteriorState {
    pub fn posterior_mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.score.len());
        for (r, mi) in self.resp.iter().zip(&self.means) {
            m += mi * *r;
        }
        m
    }
}

impl ObservationPosterior {
    pub fn new(prior: &GaussianMixture, scale: f64, noise_sd: f64) -> Result<Self> {
        if !(noise_sd > 0.0) || !noise_sd.is_finite() || !scale.is_finite() {
            return Err(Error::Domain(format!(
                "degenerate observation channel (scale={scale}, noise_sd={noise_sd})"
            )));
        }
        let d = prior.dim();
        let eye = DMatrix::<f64>::identity(d, d);
        let tau2 = noise_sd * noise_sd;
        let components = prior
            .components()
            .iter()
            .zip(prior.log_weights())
            .map(|(c, lw)| {
                let s_mat = c.cov() * (scale * scale) + &eye * tau2;
                let obs_chol = Cholesky::new(s_mat)
                    .ok_or_else(|| Error::Numeric("observation covariance not PD".into()))?;
                let obs_log_det =
                    2.0 * obs_chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                // S⁻¹Σ = (ΣS⁻¹)ᵀ; the two commute so this is symmetric up to rounding
                let s_inv_sigma = obs_chol.solve(c.cov());
                let sigma_s_inv = s_inv_sigma.transpose();
                let gain = &sigma_s_inv * scale;
                let cov = (&sigma_s_inv + &s_inv_sigma) * (0.5 * tau2);
                let cov = Gaussian::new(DVector::zeros(d), cov)
                    .map_err(|_| Error::Numeric("posterior covariance not PD".into()))?;
                Ok(PosteriorComponent {
                    prior_mean: c.mean().clone(),
                    log_weight: *lw,
                    obs_mean: c.mean() * scale,
                    obs_chol,
                    obs_log_det,
                    gain,
                    cov,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            scale,
            noise_sd,
            dim: d,
            components,
        })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn noise_sd(&self) -> f64 {
        self.noise_sd
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[PosteriorComponent] {
        &self.components
    }

    pub fn state(&self, y: &DVector<f64>) -> Result<PosteriorState> {
        check_dim(self.dim, y.len())?;
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.log_weight + c.log_evidence(y))
            .collect();
        let log_marginal = log_sum_exp(&terms);
        if !log_marginal.is_finite() {
            return Err(Error::Numeric(format!("marginal log-density is {log_marginal}")));
        }
        let log_resp: Vec<f64> = terms.iter().map(|t| t - log_marginal).collect();
        let resp: Vec<f64> = log_resp.iter().map(|l| l.exp()).collect();
        let comp_scores: Vec<DVector<f64>> =
            self.components.iter().map(|c| c.evidence_score(y)).collect();
        let mut score = DVector::zeros(self.dim);
        for (r, s) in resp.iter().zip(&comp_scores) {
            score += s * *r;
        }
        Ok(PosteriorState {
            log_resp,
            resp,
            means: self.components.iter().map(|c| c.mean_at(y)).collect(),
            comp_scores,
            score,
            log_marginal,
        })
    }

    pub fn mixture(&self, y: &DVector<f64>) -> Result<GaussianMixture> {
        let st = self.state(y)?;
        let comps = self
            .components
            .iter()
            .zip(&st.means)
            .map(|(c, m)| Gaussian::new(m.clone(), c.covariance().clone()))
            .collect::<Result<Vec<_>>>()?;
        GaussianMixture::from_log_weights(st.log_resp, comps)
    }

    /// `log p(x | y)` under the posterior mixture.
    pub fn log_density(&self, st: &PosteriorState, x: &DVector<f64>) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(&st.means)
            .zip(&st.log_resp)
            .map(|((c, m), lr)| lr + c.cov.log_density(&(x - m)))
            .collect();
        log_sum_exp(&terms)
    }

    /// Jacobian `∂E[x|y]/∂y = Σγ_i K_i + Σγ_i m_i (s_i - s̄)ᵀ`.
    pub fn mean_jacobian(&self, st: &PosteriorState) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.dim, self.dim);
        for (i, c) in self.components.iter().enumerate() {
            let r = st.resp[i];
            if r == 0.0 {
                continue;
            }
            j += &c.gain * r;
            j += (&st.means[i] * (&st.comp_scores[i] - &st.score).transpose()) * r;
        }
        j
    }
}

/// Posterior of `x₀` given `x_t` under the VP kernel.
pub fn diffusion_posterior(gm: &GaussianMixture, sched: &NoiseSchedule, t: f64) -> Result<ObservationPosterior> {
    sched.check_time(t)?;
    if t == 0.0 {
        return Err(Error::Domain("posterior at t=0 has a degenerate likelihood".into()));
    }
    ObservationPosterior::new(gm, sched.alpha(t), sched.sigma(t))
}

pub fn posterior_x0_given_xt(
    gm: &GaussianMixture,
    sched: &NoiseSchedule,
    t: f64,
    x_t: &DVector<f64>,
) -> Result<GaussianMixture> {
    diffusion_posterior(gm, sched, t)?.mixture(x_t)
}
