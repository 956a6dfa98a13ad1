//! Generation: reverse-SDE Euler–Maruyama, probability-flow ODE, the
//! Tweedie one-step and few-step denoisers, and flow-matching Euler.
//!
//! Every trajectory owns an RNG stream derived from the run seed and its
//! index, so batches are bit-identical regardless of thread count.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::Prompt;
use crate::error::{Error, Result};
use crate::flow_guidance::{FlowGuidanceKind, FlowGuidanceSource, FlowProblem, FlowSlice, ESS_WARN_FRACTION};
use crate::guidance::{Guidance, GuidanceProblem, GuidanceSource, TimeSlice};
use crate::metrics::{mean_reward, EssSummary, RewardSummary, Welford};
use crate::numeric::{stream_rng, Rng};

/// Floor on `α_T` in the Tweedie denoiser.
pub const ALPHA_FLOOR: f64 = 1e-3;
pub const DEFAULT_T_END: f64 = 1e-4;
pub const DEFAULT_BATCH: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    ReverseSde,
    ProbFlowOde,
    FlowEuler,
    /// Guided Tweedie denoiser at `t = T`.
    OneStep,
    /// Tweedie denoise, re-noise to the next time, repeat.
    FewStep,
}

impl SamplerKind {
    pub fn default_steps(self) -> usize {
        match self {
            SamplerKind::ReverseSde | SamplerKind::ProbFlowOde => 256,
            SamplerKind::FlowEuler => 32,
            SamplerKind::OneStep => 1,
            SamplerKind::FewStep => 2,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            SamplerKind::ReverseSde => "reverse_sde",
            SamplerKind::ProbFlowOde => "prob_flow_ode",
            SamplerKind::FlowEuler => "flow_euler",
            SamplerKind::OneStep => "one_step",
            SamplerKind::FewStep => "few_step",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Defaults per kind when absent.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    /// Diffusion samplers integrate from `T` down to `t_end`.
    #[serde(default = "default_t_end")]
    pub t_end: f64,
}

fn default_batch() -> usize {
    DEFAULT_BATCH
}

fn default_t_end() -> f64 {
    DEFAULT_T_END
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind, batch: usize, seed: u64) -> Self {
        Self {
            kind,
            steps: None,
            batch,
            seed,
            t_end: DEFAULT_T_END,
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = Some(steps);
        self
    }

    pub fn steps(&self) -> usize {
        self.steps.unwrap_or_else(|| self.kind.default_steps())
    }

    pub fn validate(&self, horizon: f64) -> Result<()> {
        let steps = self.steps();
        if steps == 0 {
            return Err(Error::Input("sampler steps must be ≥ 1".into()));
        }
        if self.kind == SamplerKind::OneStep && steps != 1 {
            return Err(Error::Input(format!("one_step sampler takes exactly 1 step (got {steps})")));
        }
        if self.batch == 0 {
            return Err(Error::Input("sampler batch must be ≥ 1".into()));
        }
        if !(self.t_end > 0.0 && self.t_end < horizon) {
            return Err(Error::Input(format!("t_end must lie in (0, {horizon}) (got {})", self.t_end)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub sampler: SamplerKind,
    pub guidance: String,
    pub steps: usize,
    pub n: usize,
    pub dim: usize,
    pub seed: u64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub reward: RewardSummary,
    pub ess: Option<EssSummary>,
    /// Denoiser evaluations where `α_T` was raised to the floor.
    pub alpha_floor_hits: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub samples: Vec<DVector<f64>>,
    pub stats: SampleStats,
}

struct Traj {
    x: DVector<f64>,
    rng: Rng,
}

fn standard_normal(d: usize, rng: &mut Rng) -> DVector<f64> {
    crate::guidance::standard_normal(d, rng)
}

fn init_trajectories(n: usize, d: usize, seed: u64) -> Vec<Traj> {
    (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let x = standard_normal(d, &mut rng);
            Traj { x, rng }
        })
        .collect()
}

/// Apply `f` to every trajectory; returns the per-trajectory ESS values.
fn advance<F>(trajs: &mut [Traj], step: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Traj) -> Result<Option<f64>> + Sync,
{
    let out: Vec<Result<Option<f64>>> = trajs
        .par_iter_mut()
        .enumerate()
        .map(|(i, tr)| {
            let ess = f(tr)?;
            if tr.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!("non-finite state in trajectory {i}")));
            }
            Ok(ess)
        })
        .collect();
    let mut ess = Vec::new();
    for r in out {
        if let Some(e) = r.map_err(|e| e.context(&format!("step {step}")))? {
            ess.push(e);
        }
    }
    Ok(ess)
}

struct Collector {
    ess: Vec<f64>,
    k: usize,
    alpha_floor_hits: usize,
    warnings: Vec<String>,
}

impl Collector {
    fn new(k: usize) -> Self {
        Self {
            ess: Vec::new(),
            k,
            alpha_floor_hits: 0,
            warnings: Vec::new(),
        }
    }

    fn finish(
        mut self,
        trajs: Vec<Traj>,
        kind: SamplerKind,
        guidance: &str,
        steps: usize,
        seed: u64,
        reward: &crate::rewards::Reward,
    ) -> Result<SampleBatch> {
        let samples: Vec<DVector<f64>> = trajs.into_iter().map(|t| t.x).collect();
        let d = samples[0].len();
        let mut acc = vec![Welford::default(); d];
        for x in &samples {
            for (a, v) in acc.iter_mut().zip(x.iter()) {
                a.push(*v);
            }
        }
        let ess = EssSummary::from_values(&self.ess, self.k, ESS_WARN_FRACTION);
        if let Some(e) = &ess {
            if e.low > 0 {
                self.warnings.push(format!(
                    "importance weights degenerate: ESS/K < {ESS_WARN_FRACTION} in {} of {} evaluations (min ESS {:.2})",
                    e.low, e.evaluations, e.min
                ));
            }
        }
        if self.alpha_floor_hits > 0 {
            self.warnings.push(format!("α_T raised to {ALPHA_FLOOR} in {} evaluations", self.alpha_floor_hits));
        }
        Ok(SampleBatch {
            stats: SampleStats {
                sampler: kind,
                guidance: guidance.to_string(),
                steps,
                n: samples.len(),
                dim: d,
                seed,
                mean: acc.iter().map(|a| a.mean()).collect(),
                variance: acc.iter().map(|a| a.variance()).collect(),
                reward: mean_reward(&samples, reward)?,
                ess,
                alpha_floor_hits: self.alpha_floor_hits,
                warnings: self.warnings,
            },
            samples,
        })
    }
}

fn is_k(g: &Guidance) -> usize {
    match g.source {
        GuidanceSource::GradFreeIs { k } => k,
        _ => 0,
    }
}

/// Dispatch on `cfg.kind` for the diffusion samplers.
pub fn sample_diffusion(problem: &GuidanceProblem, y: Prompt, g: &Guidance, cfg: &SamplerConfig) -> Result<SampleBatch> {
    match cfg.kind {
        SamplerKind::ReverseSde => sample_reverse_sde(problem, y, g, cfg),
        SamplerKind::ProbFlowOde => sample_prob_flow_ode(problem, y, g, cfg),
        SamplerKind::OneStep => sample_one_step(problem, y, g, cfg),
        SamplerKind::FewStep => sample_few_step(problem, y, g, cfg),
        SamplerKind::FlowEuler => Err(Error::Usage("flow_euler needs a flow problem; use sample_flow".into())),
    }
}

fn check_kind(cfg: &SamplerConfig, want: &[SamplerKind]) -> Result<()> {
    if want.contains(&cfg.kind) {
        Ok(())
    } else {
        Err(Error::Usage(format!("sampler kind {} used with the wrong entry point", cfg.kind.tag())))
    }
}

fn integrate_diffusion(problem: &GuidanceProblem, y: Prompt, g: &Guidance, cfg: &SamplerConfig, stochastic: bool) -> Result<SampleBatch> {
    let sched = &problem.sched;
    cfg.validate(sched.horizon)?;
    problem.gm(y)?;
    let n = cfg.steps();
    let h = (sched.horizon - cfg.t_end) / n as f64;
    let mut trajs = init_trajectories(cfg.batch, problem.dim(), cfg.seed);
    let mut col = Collector::new(is_k(g));
    for k in 0..n {
        let t = sched.horizon - k as f64 * h;
        let slice = TimeSlice::new(problem, y, t).map_err(|e| e.context(&format!("step {k}")))?;
        let beta = sched.beta(t);
        let sqrt_h = h.sqrt();
        let ess = advance(&mut trajs, k, |tr| {
            let ev = slice.guided(g, &tr.x, &mut tr.rng)?;
            if stochastic {
                // dx = [f - g²s]dt + g dw̄, stepped backwards in time
                let z = standard_normal(tr.x.len(), &mut tr.rng);
                tr.x = &tr.x + (&tr.x * (0.5 * beta) + &ev.score * beta) * h + z * (beta.sqrt() * sqrt_h);
            } else {
                tr.x = &tr.x + (&tr.x * (0.5 * beta) + &ev.score * (0.5 * beta)) * h;
            }
            Ok(ev.ess)
        })?;
        col.ess.extend(ess);
    }
    col.finish(trajs, cfg.kind, g.source.tag(), n, cfg.seed, &problem.reward)
}

/// Euler–Maruyama on the reverse SDE from `x_T ~ N(0, I)` down to `t_end`.
pub fn sample_reverse_sde(problem: &GuidanceProblem, y: Prompt, g: &Guidance, cfg: &SamplerConfig) -> Result<SampleBatch> {
    check_kind(cfg, &[SamplerKind::ReverseSde])?;
    integrate_diffusion(problem, y, g, cfg, true)
}

/// Euler on the probability-flow ODE `dx = [f - ½g²s]dt`.
pub fn sample_prob_flow_ode(problem: &GuidanceProblem, y: Prompt, g: &Guidance, cfg: &SamplerConfig) -> Result<SampleBatch> {
    check_kind(cfg, &[SamplerKind::ProbFlowOde])?;
    integrate_diffusion(problem, y, g, cfg, false)
}

/// `x̂₀ = (x_t + σ_t²·s̃(x_t))/α_t`, the guided Tweedie denoiser.
fn denoise(slice: &TimeSlice, g: &Guidance, tr: &mut Traj) -> Result<(Option<f64>, bool)> {
    let ev = slice.guided(g, &tr.x, &mut tr.rng)?;
    let (a, s) = (slice.alpha(), slice.sigma());
    let floored = a < ALPHA_FLOOR;
    tr.x = (&tr.x + &ev.score * (s * s)) / a.max(ALPHA_FLOOR);
    Ok((ev.ess, floored))
}

fn tweedie_chain(problem: &GuidanceProblem, y: Prompt, g: &Guidance, cfg: &SamplerConfig) -> Result<SampleBatch> {
    let sched = &problem.sched;
    cfg.validate(sched.horizon)?;
    problem.gm(y)?;
    let n = cfg.steps();
    let times: Vec<f64> = (0..n).map(|j| sched.horizon * (n - j) as f64 / n as f64).collect();
    let mut trajs = init_trajectories(cfg.batch, problem.dim(), cfg.seed);
    let mut col = Collector::new(is_k(g));
    for (j, &t) in times.iter().enumerate() {
        let slice = TimeSlice::new(problem, y, t).map_err(|e| e.context(&format!("step {j}")))?;
        let next = times.get(j + 1).map(|tn| (sched.alpha(*tn), sched.sigma(*tn)));
        let floored = std::sync::atomic::AtomicUsize::new(0);
        let ess = advance(&mut trajs, j, |tr| {
            let (ess, hit) = denoise(&slice, g, tr)?;
            if hit {
                floored.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            }
            if let Some((a, s)) = next {
                let z = standard_normal(tr.x.len(), &mut tr.rng);
                tr.x = &tr.x * a + z * s;
            }
            Ok(ess)
        })?;
        col.alpha_floor_hits += floored.into_inner();
        col.ess.extend(ess);
    }
    col.finish(trajs, cfg.kind, g.source.tag(), n, cfg.seed, &problem.reward)
}

/// Single guided denoising evaluation at `t = T`.
pub fn sample_one_step(problem: &GuidanceProblem, y: Prompt, g: &Guidance, cfg: &SamplerConfig) -> Result<SampleBatch> {
    check_kind(cfg, &[SamplerKind::OneStep])?;
    tweedie_chain(problem, y, g, cfg)
}

/// `steps` guided denoising evaluations on a uniform time grid from `T`, with
/// forward re-noising between them.
pub fn sample_few_step(problem: &GuidanceProblem, y: Prompt, g: &Guidance, cfg: &SamplerConfig) -> Result<SampleBatch> {
    check_kind(cfg, &[SamplerKind::FewStep])?;
    tweedie_chain(problem, y, g, cfg)
}

/// Euler on the (guided) flow velocity from `x₀ ~ N(0, I)` over
/// `[0, 1 - ε]`, then one conditional-mean step to `t = 1`.
pub fn sample_flow(problem: &FlowProblem, y: Prompt, g: &FlowGuidanceSource, cfg: &SamplerConfig) -> Result<SampleBatch> {
    check_kind(cfg, &[SamplerKind::FlowEuler])?;
    cfg.validate(1.0)?;
    problem.gm(y)?;
    let g = FlowGuidanceSource::new(g.kind, g.clamp)?;
    let n = cfg.steps();
    let eps = g.clamp;
    let h = (1.0 - eps) / n as f64;
    let k_is = match g.kind {
        FlowGuidanceKind::TrainingFreeIs { k } => k,
        _ => 0,
    };
    let mut trajs = init_trajectories(cfg.batch, problem.dim(), cfg.seed);
    let mut col = Collector::new(k_is);
    for k in 0..=n {
        let (slice, dt) = if k < n {
            (FlowSlice::new(problem, y, k as f64 * h, eps), h)
        } else {
            (FlowSlice::endpoint(problem, y, eps), eps)
        };
        let slice = slice.map_err(|e| e.context(&format!("step {k}")))?;
        let ess = advance(&mut trajs, k, |tr| {
            let ev = slice.guided(&g, &tr.x, &mut tr.rng)?;
            tr.x = &tr.x + ev.velocity * dt;
            Ok(ev.ess)
        })?;
        col.ess.extend(ess);
    }
    col.finish(trajs, cfg.kind, g.tag(), n, cfg.seed, &problem.reward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::GaussianMixture;
    use crate::guidance::M1Mode;
    use crate::rewards::Reward;
    use crate::NoiseSchedule;

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn gauss_problem(mu: f64, var: f64, a: f64) -> GuidanceProblem {
        GuidanceProblem::single(
            GaussianMixture::from_1d(&[(1.0, mu, var)]).unwrap(),
            NoiseSchedule::default(),
            Reward::linear(v1(a), 1.0).unwrap(),
        )
        .unwrap()
    }

    fn within_3se(stats: &SampleStats, mean: f64, var: f64) {
        let n = stats.n as f64;
        let se_mean = (var / n).sqrt();
        // sample variance SE for a Gaussian: var·√(2/(n-1))
        let se_var = var * (2.0 / (n - 1.0)).sqrt();
        assert!((stats.mean[0] - mean).abs() < 3.0 * se_mean, "mean {} vs {mean}", stats.mean[0]);
        assert!((stats.variance[0] - var).abs() < 3.0 * se_var, "var {} vs {var}", stats.variance[0]);
    }

    #[test]
    fn reverse_sde_unguided_matches_data_moments() {
        let p = gauss_problem(1.0, 0.5, 1.0);
        let cfg = SamplerConfig::new(SamplerKind::ReverseSde, 10_000, 3).with_steps(512);
        let b = sample_reverse_sde(&p, Prompt(0), &Guidance::none(), &cfg).unwrap();
        within_3se(&b.stats, 1.0, 0.5);
    }

    #[test]
    fn reverse_sde_exact_guidance_matches_tilted_moments() {
        // tilt of N(1, 0.5) by exp(x) is N(1.5, 0.5)
        let p = gauss_problem(1.0, 0.5, 1.0);
        let cfg = SamplerConfig::new(SamplerKind::ReverseSde, 10_000, 4).with_steps(512);
        let b = sample_reverse_sde(&p, Prompt(0), &Guidance::unit(GuidanceSource::Exact).unwrap(), &cfg).unwrap();
        within_3se(&b.stats, 1.5, 0.5);
    }

    #[test]
    fn samplers_are_deterministic() {
        let p = gauss_problem(0.0, 1.0, 1.0);
        let g = Guidance::unit(GuidanceSource::M1 { n: 8, mode: M1Mode::ScoreCorrected }).unwrap();
        let cfg = SamplerConfig::new(SamplerKind::ReverseSde, 64, 9).with_steps(16);
        let a = sample_reverse_sde(&p, Prompt(0), &g, &cfg).unwrap();
        let b = sample_reverse_sde(&p, Prompt(0), &g, &cfg).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = sample_reverse_sde(&p, Prompt(0), &g, &SamplerConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn ode_endpoint_quantiles_match_data() {
        let p = gauss_problem(0.5, 2.0, 1.0);
        let cfg = SamplerConfig::new(SamplerKind::ProbFlowOde, 4000, 5).with_steps(512);
        let b = sample_prob_flow_ode(&p, Prompt(0), &Guidance::none(), &cfg).unwrap();
        let mut xs: Vec<f64> = b.samples.iter().map(|x| x[0]).collect();
        xs.sort_by(|a, b| a.total_cmp(b));
        let n = xs.len() as f64;
        let cdf = |x: f64| 0.5 * (1.0 + statrs::function::erf::erf((x - 0.5) / 2.0));
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let f = cdf(*x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 1.63 / n.sqrt(), "KS {ks}");
    }

    #[test]
    fn ode_discretization_error_halves_with_steps() {
        let p = gauss_problem(0.0, 0.3, 1.0);
        let run = |steps: usize| {
            let cfg = SamplerConfig::new(SamplerKind::ProbFlowOde, 200, 1).with_steps(steps);
            sample_prob_flow_ode(&p, Prompt(0), &Guidance::none(), &cfg).unwrap().samples
        };
        let reference = run(16384);
        let rms = |xs: &[DVector<f64>]| {
            (xs.iter().zip(&reference).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() / xs.len() as f64).sqrt()
        };
        let ratio = rms(&run(64)) / rms(&run(128));
        assert!((1.5..=2.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn one_step_unguided_contracts_to_posterior_mean() {
        let p = gauss_problem(0.0, 1.0, 1.0);
        let cfg = SamplerConfig::new(SamplerKind::OneStep, 2000, 2);
        let b = sample_one_step(&p, Prompt(0), &Guidance::none(), &cfg).unwrap();
        assert!(b.stats.variance[0] < 1.0);
        assert_eq!(b.stats.alpha_floor_hits, 0);
        let (a, s) = (p.sched.alpha(1.0), p.sched.sigma(1.0));
        // posterior mean for N(0,1): α x/(α²+σ²)
        let x_t = init_trajectories(1, 1, 2)[0].x[0];
        assert!((b.samples[0][0] - a * x_t / (a * a + s * s)).abs() < 1e-12);
    }

    #[test]
    fn one_step_exact_guidance_shifts_toward_tilt() {
        for a in [2.0, -2.0] {
            let p = gauss_problem(0.0, 1.0, a);
            let cfg = SamplerConfig::new(SamplerKind::OneStep, 500, 2);
            let b = sample_one_step(&p, Prompt(0), &Guidance::unit(GuidanceSource::Exact).unwrap(), &cfg).unwrap();
            assert_eq!(b.stats.mean[0].signum(), a.signum());
        }
        assert!(SamplerConfig::new(SamplerKind::OneStep, 10, 0).with_steps(2).validate(1.0).is_err());
    }

    #[test]
    fn flow_unguided_and_guided_moments() {
        let gm = GaussianMixture::from_1d(&[(1.0, 1.0, 0.5)]).unwrap();
        let p = FlowProblem::single(gm, Reward::linear(v1(1.0), 1.0).unwrap()).unwrap();
        let cfg = SamplerConfig::new(SamplerKind::FlowEuler, 10_000, 7).with_steps(512);
        let b = sample_flow(&p, Prompt(0), &FlowGuidanceSource::none(), &cfg).unwrap();
        within_3se(&b.stats, 1.0, 0.5);
        let b = sample_flow(&p, Prompt(0), &FlowGuidanceSource::exact(), &cfg).unwrap();
        within_3se(&b.stats, 1.5, 0.5);
    }

    #[test]
    fn flow_is_guidance_reports_ess() {
        let gm = GaussianMixture::from_1d(&[(0.5, -1.0, 0.3), (0.5, 1.0, 0.3)]).unwrap();
        let p = FlowProblem::single(gm, Reward::linear(v1(1.0), 1.0).unwrap()).unwrap();
        let cfg = SamplerConfig::new(SamplerKind::FlowEuler, 50, 7).with_steps(8);
        let g = FlowGuidanceSource::training_free_is(64).unwrap();
        let b = sample_flow(&p, Prompt(0), &g, &cfg).unwrap();
        let e = b.stats.ess.unwrap();
        assert_eq!(e.evaluations, 50 * 9);
        assert!(e.min >= 1.0 && e.mean <= 64.0);
        assert!(b.stats.warnings.iter().any(|w| w.contains("degenerate")) == (e.low > 0));
    }

    #[test]
    fn wrong_entry_points_rejected() {
        let p = gauss_problem(0.0, 1.0, 1.0);
        let cfg = SamplerConfig::new(SamplerKind::FlowEuler, 10, 0);
        assert!(matches!(sample_diffusion(&p, Prompt(0), &Guidance::none(), &cfg), Err(Error::Usage(_))));
        let cfg = SamplerConfig::new(SamplerKind::ReverseSde, 10, 0);
        assert!(sample_one_step(&p, Prompt(0), &Guidance::none(), &cfg).is_err());
        assert!(serde_json::from_str::<SamplerConfig>(r#"{"kind":"reverse_sde","stepz":3}"#).is_err());
    }
}
