//! Diffusion-side guidance: the exact term `∇_{x_t} log E[exp(r(x₀)/β) | x_t]`
//! and its estimators, plus training of networks that approximate it.

mod estimators;
mod exact;
mod grad_field;
mod network;
mod train;

pub use estimators::{IsEstimate, M1Estimate, M1Mode};
pub use exact::{PosteriorTilt, TiltState};
pub use grad_field::{train_grad_field_net, GradFieldReport};
pub use network::{
    encode_input, input_width, GuidanceNetwork, NetworkHeader, NetworkKind, Provenance, TimeMode,
    NETWORK_FORMAT,
};
pub(crate) use train::standard_normal;
pub use train::{
    evaluation_grid, train_guidance_network, ConsistencyMode, EpochLog, GridPoint, LambdaWeight,
    TrainingConfig, TrainingReport,
};

use std::sync::Arc;

use nalgebra::DVector;

use crate::analytic::{
    diffusion_posterior, GaussianMixture, NoiseSchedule, ObservationPosterior, PosteriorState, Prompt,
    PromptRegistry,
};
use crate::error::{check_dim, Error, Result};
use crate::numeric::{rng_from_seed, Rng};
use crate::rewards::{tilt_gm, Reward, TiltedDistribution};

/// The pre-trained (analytic) model, its schedule and the reward being tilted
/// toward.
#[derive(Debug, Clone)]
pub struct GuidanceProblem {
    pub registry: PromptRegistry,
    pub sched: NoiseSchedule,
    pub reward: Reward,
}

impl GuidanceProblem {
    pub fn new(registry: PromptRegistry, sched: NoiseSchedule, reward: Reward) -> Result<Self> {
        sched.validate()?;
        check_dim(registry.dim(), reward.dim())?;
        Ok(Self {
            registry,
            sched,
            reward,
        })
    }

    /// Single-prompt problem.
    pub fn single(gm: GaussianMixture, sched: NoiseSchedule, reward: Reward) -> Result<Self> {
        Self::new(PromptRegistry::new(vec![gm])?, sched, reward)
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

    pub fn slice(&self, y: Prompt, t: f64) -> Result<TimeSlice<'_>> {
        TimeSlice::new(self, y, t)
    }
}

#[derive(Debug, Clone)]
pub enum GuidanceSource {
    None,
    Exact,
    M1 { n: usize, mode: M1Mode },
    M2,
    TrainedNet(Arc<GuidanceNetwork>),
    GradFreeIs { k: usize },
    GradFieldNet(Arc<GuidanceNetwork>),
}

impl GuidanceSource {
    pub fn tag(&self) -> &'static str {
        match self {
            GuidanceSource::None => "none",
            GuidanceSource::Exact => "exact",
            GuidanceSource::M1 { .. } => "m1_mc",
            GuidanceSource::M2 => "m2_tweedie",
            GuidanceSource::TrainedNet(_) => "trained_net",
            GuidanceSource::GradFreeIs { .. } => "grad_free_is",
            GuidanceSource::GradFieldNet(_) => "grad_field_net",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            GuidanceSource::M1 { n, .. } if *n < 2 => Err(Error::Input(format!("M1 needs n ≥ 2 (got {n})"))),
            GuidanceSource::GradFreeIs { k } if *k < 2 => {
                Err(Error::Input(format!("importance sampling needs K ≥ 2 (got {k})")))
            }
            GuidanceSource::GradFieldNet(net) if net.header.time_mode != TimeMode::OneStep => Err(
                Error::Validation("gradient-field networks are one-step only".into()),
            ),
            _ => Ok(()),
        }
    }

    /// Draws random numbers when evaluated.
    pub fn is_stochastic(&self) -> bool {
        matches!(self, GuidanceSource::M1 { .. } | GuidanceSource::GradFreeIs { .. })
    }
}

/// A guidance source with strength `α` (default 1).
#[derive(Debug, Clone)]
pub struct Guidance {
    pub source: GuidanceSource,
    pub strength: f64,
}

impl Guidance {
    pub fn new(source: GuidanceSource, strength: f64) -> Result<Self> {
        if !strength.is_finite() {
            return Err(Error::Input(format!("guidance strength must be finite (got {strength})")));
        }
        source.validate()?;
        Ok(Self { source, strength })
    }

    pub fn unit(source: GuidanceSource) -> Result<Self> {
        Self::new(source, 1.0)
    }

    pub fn none() -> Self {
        Self {
            source: GuidanceSource::None,
            strength: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GuidanceEval {
    /// Pre-trained score plus `α·guidance`.
    pub score: DVector<f64>,
    pub guidance: DVector<f64>,
    /// Effective sample size of importance-sampling sources.
    pub ess: Option<f64>,
}

/// Everything at a fixed `(prompt, t)` that does not depend on `x_t`.
#[derive(Debug, Clone)]
pub struct TimeSlice<'a> {
    pub problem: &'a GuidanceProblem,
    pub prompt: Prompt,
    pub t: f64,
    pub post: ObservationPosterior,
    tilt: Option<PosteriorTilt>,
    tilt_err: Option<String>,
}

impl<'a> TimeSlice<'a> {
    pub fn new(problem: &'a GuidanceProblem, prompt: Prompt, t: f64) -> Result<Self> {
        let gm = problem.gm(prompt)?;
        let post = diffusion_posterior(gm, &problem.sched, t)?;
        let (tilt, tilt_err) = match PosteriorTilt::new(&post, &problem.reward) {
            Ok(p) => (Some(p), None),
            Err(e @ (Error::Unsupported(_) | Error::Domain(_))) => (None, Some(e.to_string())),
            Err(e) => return Err(e),
        };
        Ok(Self {
            problem,
            prompt,
            t,
            post,
            tilt,
            tilt_err,
        })
    }

    pub fn gm(&self) -> &GaussianMixture {
        self.problem.gm(self.prompt).expect("validated at construction")
    }

    pub fn alpha(&self) -> f64 {
        self.post.scale()
    }

    pub fn sigma(&self) -> f64 {
        self.post.noise_sd()
    }

    pub fn state(&self, x: &DVector<f64>) -> Result<PosteriorState> {
        self.post.state(x)
    }

    pub fn tilt(&self) -> Result<&PosteriorTilt> {
        self.tilt.as_ref().ok_or_else(|| {
            Error::Unsupported(
                self.tilt_err
                    .clone()
                    .unwrap_or_else(|| "exact guidance unavailable".into()),
            )
        })
    }

    /// Exact guidance and `log E[exp(r/β) | x_t]`.
    pub fn exact_with_log_g(&self, st: &PosteriorState) -> Result<(DVector<f64>, f64)> {
        let tilt = self.tilt()?;
        let ts = tilt.evaluate(&self.post, st)?;
        Ok((tilt.log_g_gradient(&self.post, st, &ts), ts.log_g))
    }

    pub fn exact(&self, st: &PosteriorState) -> Result<DVector<f64>> {
        Ok(self.exact_with_log_g(st)?.0)
    }

    /// `E[exp(r(x₀)/β) | x_t]`, the regression target of a guidance network.
    pub fn conditional_expectation(&self, x: &DVector<f64>) -> Result<f64> {
        let st = self.state(x)?;
        Ok(self.exact_with_log_g(&st)?.1.exp())
    }

    /// Pre-trained score plus `α·guidance` from `g`.
    pub fn guided(&self, g: &Guidance, x: &DVector<f64>, rng: &mut Rng) -> Result<GuidanceEval> {
        check_dim(self.problem.dim(), x.len())?;
        let st = self.state(x)?;
        let mut ess = None;
        let guidance = match &g.source {
            GuidanceSource::None => DVector::zeros(x.len()),
            GuidanceSource::Exact => self.exact(&st)?,
            GuidanceSource::M1 { n, mode } => self.m1(&st, *n, *mode, rng)?.grad,
            GuidanceSource::M2 => self.m2(&st),
            GuidanceSource::GradFreeIs { k } => {
                let est = self.grad_free_is(x, &st, *k, rng)?;
                ess = Some(est.ess);
                est.grad
            }
            GuidanceSource::TrainedNet(net) | GuidanceSource::GradFieldNet(net) => {
                net.guidance(x, self.prompt, self.t)?
            }
        };
        let score = &st.score + &guidance * g.strength;
        Ok(GuidanceEval { score, guidance, ess })
    }
}

fn slice_state<'a>(
    problem: &'a GuidanceProblem,
    y: Prompt,
    t: f64,
    x_t: &DVector<f64>,
) -> Result<(TimeSlice<'a>, PosteriorState)> {
    check_dim(problem.dim(), x_t.len())?;
    let slice = problem.slice(y, t)?;
    let st = slice.state(x_t)?;
    Ok((slice, st))
}

/// Exact guidance at a single point.
pub fn guidance_exact(problem: &GuidanceProblem, y: Prompt, x_t: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    let (slice, st) = slice_state(problem, y, t, x_t)?;
    slice.exact(&st)
}

pub fn guidance_m1_mc(
    problem: &GuidanceProblem,
    y: Prompt,
    x_t: &DVector<f64>,
    t: f64,
    n: usize,
    seed: u64,
) -> Result<M1Estimate> {
    let (slice, st) = slice_state(problem, y, t, x_t)?;
    slice.m1(&st, n, M1Mode::default(), &mut rng_from_seed(seed))
}

pub fn guidance_m2_tweedie(problem: &GuidanceProblem, y: Prompt, x_t: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    let (slice, st) = slice_state(problem, y, t, x_t)?;
    Ok(slice.m2(&st))
}

/// Gradient-free importance-sampling estimate with its effective sample size.
pub fn guidance_grad_free_is(
    problem: &GuidanceProblem,
    y: Prompt,
    x_t: &DVector<f64>,
    t: f64,
    k: usize,
    seed: u64,
) -> Result<IsEstimate> {
    let (slice, st) = slice_state(problem, y, t, x_t)?;
    slice.grad_free_is(x_t, &st, k, &mut rng_from_seed(seed))
}

pub fn guided_score(
    g: &Guidance,
    problem: &GuidanceProblem,
    y: Prompt,
    x_t: &DVector<f64>,
    t: f64,
    seed: u64,
) -> Result<GuidanceEval> {
    problem.slice(y, t)?.guided(g, x_t, &mut rng_from_seed(seed))
}
