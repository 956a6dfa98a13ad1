//! Velocity guidance for flow matching on the linear path
//! `x_t = t·x₁ + (1-t)·x₀`, `x₀ ~ N(0, I)`.
//!
//! The guided velocity is the posterior mean of the conditional velocity
//! under the reward-tilted posterior `q(x₁ | x_t) ∝ p(x₁ | x_t)·exp(r/β)`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::analytic::{
    fm_posterior, FlowPath, GaussianMixture, FLOW_T_CLAMP, ObservationPosterior, PosteriorState, Prompt, PromptRegistry,
};
use crate::error::{check_dim, Error, Result};
use crate::guidance::PosteriorTilt;
use crate::numeric::{ess_from_log_weights, log_sum_exp, rng_from_seed, Rng};
use crate::rewards::{tilt_gm, Reward, TiltedDistribution};

pub const DEFAULT_FLOW_CLAMP: f64 = 1e-3;
pub const MAX_FLOW_CLAMP: f64 = 1e-2;
/// Runs whose importance ESS/K falls below this are flagged.
pub const ESS_WARN_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowGuidanceKind {
    None,
    Exact,
    TrainingFreeIs { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowGuidanceSource {
    pub kind: FlowGuidanceKind,
    /// Integration stops at `1 - clamp`.
    pub clamp: f64,
}

impl FlowGuidanceSource {
    pub fn new(kind: FlowGuidanceKind, clamp: f64) -> Result<Self> {
        if !(clamp > FLOW_T_CLAMP && clamp <= MAX_FLOW_CLAMP) {
            return Err(Error::Input(format!(
                "flow clamp must lie in ({FLOW_T_CLAMP}, {MAX_FLOW_CLAMP}] (got {clamp})"
            )));
        }
        if let FlowGuidanceKind::TrainingFreeIs { k } = kind {
            if k < 2 {
                return Err(Error::Input(format!("importance sampling needs K ≥ 2 (got {k})")));
            }
        }
        Ok(Self { kind, clamp })
    }

    pub fn exact() -> Self {
        Self { kind: FlowGuidanceKind::Exact, clamp: DEFAULT_FLOW_CLAMP }
    }

    pub fn none() -> Self {
        Self { kind: FlowGuidanceKind::None, clamp: DEFAULT_FLOW_CLAMP }
    }

    pub fn training_free_is(k: usize) -> Result<Self> {
        Self::new(FlowGuidanceKind::TrainingFreeIs { k }, DEFAULT_FLOW_CLAMP)
    }

    pub fn tag(&self) -> &'static str {
        match self.kind {
            FlowGuidanceKind::None => "none",
            FlowGuidanceKind::Exact => "exact",
            FlowGuidanceKind::TrainingFreeIs { .. } => "training_free_is",
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self.kind, FlowGuidanceKind::TrainingFreeIs { .. })
    }
}

/// Data model (one mixture per prompt) and reward for flow guidance.
#[derive(Debug, Clone)]
pub struct FlowProblem {
    pub registry: PromptRegistry,
    pub reward: Reward,
}

impl FlowProblem {
    pub fn new(registry: PromptRegistry, reward: Reward) -> Result<Self> {
        check_dim(registry.dim(), reward.dim())?;
        Ok(Self { registry, reward })
    }

    pub fn single(gm: GaussianMixture, reward: Reward) -> Result<Self> {
        Self::new(PromptRegistry::new(vec![gm])?, reward)
    }

    pub fn dim(&self) -> usize {
        self.registry.dim()
    }

    pub fn gm(&self, y: Prompt) -> Result<&GaussianMixture> {
        self.registry.get(y)
    }

    pub fn tilted(&self, y: Prompt) -> Result<TiltedDistribution> {
        tilt_gm(self.gm(y)?, &self.reward)
    }

    pub fn slice(&self, y: Prompt, t: f64, clamp: f64) -> Result<FlowSlice<'_>> {
        FlowSlice::new(self, y, t, clamp)
    }
}

#[derive(Debug, Clone)]
pub struct FlowEval {
    /// Base velocity plus correction.
    pub velocity: DVector<f64>,
    pub correction: DVector<f64>,
    pub ess: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FlowIsEstimate {
    pub velocity: DVector<f64>,
    pub correction: DVector<f64>,
    /// Delta-method standard error of the correction, per coordinate.
    pub se: DVector<f64>,
    /// ESS of the path-likelihood weights `w̃`.
    pub ess: f64,
    /// ESS of the tilted weights `w̃·exp(r/β)`.
    pub ess_tilted: f64,
    /// `Σ w̃_k`, 1 up to rounding.
    pub weight_sum: f64,
}

/// Everything at a fixed `(prompt, t)` that does not depend on `x_t`.
#[derive(Debug, Clone)]
pub struct FlowSlice<'a> {
    pub problem: &'a FlowProblem,
    pub prompt: Prompt,
    pub t: f64,
    pub post: ObservationPosterior,
    tilt: std::result::Result<PosteriorTilt, String>,
}

impl<'a> FlowSlice<'a> {
    pub fn new(problem: &'a FlowProblem, prompt: Prompt, t: f64, clamp: f64) -> Result<Self> {
        FlowPath::check_time(t, clamp)?;
        Self::build(problem, prompt, t)
    }

    /// Slice at exactly `t = 1 - clamp`, used for the final conditional-mean
    /// step of an integration.
    pub(crate) fn endpoint(problem: &'a FlowProblem, prompt: Prompt, clamp: f64) -> Result<Self> {
        FlowPath::check_time(1.0 - 2.0 * clamp, clamp)?;
        Self::build(problem, prompt, 1.0 - clamp)
    }

    fn build(problem: &'a FlowProblem, prompt: Prompt, t: f64) -> Result<Self> {
        let post = fm_posterior(problem.gm(prompt)?, t)?;
        let tilt = match PosteriorTilt::new(&post, &problem.reward) {
            Ok(p) => Ok(p),
            Err(e @ (Error::Unsupported(_) | Error::Domain(_))) => Err(e.to_string()),
            Err(e) => return Err(e),
        };
        Ok(Self { problem, prompt, t, post, tilt })
    }

    pub fn gm(&self) -> &GaussianMixture {
        self.problem.gm(self.prompt).expect("validated at construction")
    }

    fn velocity_from_mean(&self, mean: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        (mean - x) / (1.0 - self.t)
    }

    pub fn state(&self, x: &DVector<f64>) -> Result<PosteriorState> {
        check_dim(self.problem.dim(), x.len())?;
        self.post.state(x)
    }

    /// Unguided marginal velocity `E[v_t(x_t | x₁) | x_t]`.
    pub fn base_velocity(&self, x: &DVector<f64>, st: &PosteriorState) -> DVector<f64> {
        self.velocity_from_mean(&st.posterior_mean(), x)
    }

    /// Base velocity plus the exact correction `E_p[(R - 1)·v_t(x_t | x₁)]`,
    /// which equals the conditional velocity averaged under the tilted
    /// posterior.
    pub fn exact(&self, x: &DVector<f64>, st: &PosteriorState) -> Result<FlowEval> {
        let tilt = self.tilt.as_ref().map_err(|e| Error::Unsupported(e.clone()))?;
        let base = self.base_velocity(x, st);
        if tilt.is_constant() {
            return Ok(FlowEval { correction: DVector::zeros(x.len()), velocity: base, ess: None });
        }
        let ts = tilt.evaluate(&self.post, st)?;
        let velocity = self.velocity_from_mean(&ts.mean(), x);
        Ok(FlowEval { correction: &velocity - &base, velocity, ess: None })
    }

    /// Training-free estimate: data samples `x₁ᵏ ~ p` weighted by the path
    /// likelihood `N(x_t; t·x₁ᵏ, (1-t)²I)`, correction
    /// `Σ_k w̃_k (exp(r_k/β)/D̂ - 1)·v_t(x_t | x₁ᵏ)`.
    pub fn training_free_is(&self, x: &DVector<f64>, st: &PosteriorState, k: usize, rng: &mut Rng) -> Result<FlowIsEstimate> {
        if k < 2 {
            return Err(Error::Input(format!("importance sampling needs K ≥ 2 (got {k})")));
        }
        let reward = &self.problem.reward;
        let (t, tau2) = (self.t, (1.0 - self.t) * (1.0 - self.t));
        let gm = self.gm();
        let mut log_l = Vec::with_capacity(k);
        let mut log_r = Vec::with_capacity(k);
        let mut vel = Vec::with_capacity(k);
        for _ in 0..k {
            let x1 = gm.sample(rng);
            log_l.push(-(x - &x1 * t).norm_squared() / (2.0 * tau2));
            log_r.push(reward.value(&x1) / reward.beta());
            vel.push((x1 - x) / (1.0 - t));
        }
        let max_l = log_l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max_l == f64::NEG_INFINITY || max_l.is_nan() {
            return Err(Error::DegenerateWeights(format!("all {k} path log-likelihoods underflow (max {max_l})")));
        }
        let lse_l = log_sum_exp(&log_l);
        let w: Vec<f64> = log_l.iter().map(|l| (l - lse_l).exp()).collect();
        let weight_sum: f64 = w.iter().sum();
        let log_tilted: Vec<f64> = log_l.iter().zip(&log_r).map(|(l, r)| l + r).collect();
        let base = self.base_velocity(x, st);
        let d = x.len();
        let ess = ess_from_log_weights(&log_l);
        let ess_tilted = ess_from_log_weights(&log_tilted);
        // all rewards equal: R ≡ 1 and the correction vanishes identically
        if log_r.iter().all(|r| *r == log_r[0]) {
            return Ok(FlowIsEstimate {
                velocity: base,
                correction: DVector::zeros(d),
                se: DVector::zeros(d),
                ess,
                ess_tilted,
                weight_sum,
            });
        }
        let lse_q = log_sum_exp(&log_tilted);
        let wq: Vec<f64> = log_tilted.iter().map(|l| (l - lse_q).exp()).collect();
        // w̃_k·(exp(r_k/β)/D̂ - 1) = softmax(ℓ + r/β)_k - softmax(ℓ)_k
        let mut corr = DVector::zeros(d);
        let (mut mu_p, mut mu_q) = (DVector::zeros(d), DVector::zeros(d));
        for j in 0..k {
            corr += &vel[j] * (wq[j] - w[j]);
            mu_p += &vel[j] * w[j];
            mu_q += &vel[j] * wq[j];
        }
        let mut var = DVector::zeros(d);
        for j in 0..k {
            let infl = (&vel[j] - &mu_q) * wq[j] - (&vel[j] - &mu_p) * w[j];
            var += infl.component_mul(&infl);
        }
        Ok(FlowIsEstimate {
            velocity: base + &corr,
            correction: corr,
            se: var.map(f64::sqrt),
            ess,
            ess_tilted,
            weight_sum,
        })
    }

    pub fn guided(&self, source: &FlowGuidanceSource, x: &DVector<f64>, rng: &mut Rng) -> Result<FlowEval> {
        let st = self.state(x)?;
        match source.kind {
            FlowGuidanceKind::None => Ok(FlowEval {
                velocity: self.base_velocity(x, &st),
                correction: DVector::zeros(x.len()),
                ess: None,
            }),
            FlowGuidanceKind::Exact => self.exact(x, &st),
            FlowGuidanceKind::TrainingFreeIs { k } => {
                let est = self.training_free_is(x, &st, k, rng)?;
                Ok(FlowEval { velocity: est.velocity, correction: est.correction, ess: Some(est.ess) })
            }
        }
    }
}

/// Exact guided velocity at one point (default clamp).
pub fn fm_guided_velocity_exact(problem: &FlowProblem, y: Prompt, x_t: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    let slice = problem.slice(y, t, DEFAULT_FLOW_CLAMP)?;
    let st = slice.state(x_t)?;
    Ok(slice.exact(x_t, &st)?.velocity)
}

pub fn fm_guided_velocity_is(
    problem: &FlowProblem,
    y: Prompt,
    x_t: &DVector<f64>,
    t: f64,
    k: usize,
    seed: u64,
) -> Result<FlowIsEstimate> {
    let slice = problem.slice(y, t, DEFAULT_FLOW_CLAMP)?;
    let st = slice.state(x_t)?;
    slice.training_free_is(x_t, &st, k, &mut rng_from_seed(seed))
}
