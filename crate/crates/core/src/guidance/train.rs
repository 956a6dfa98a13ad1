use nalgebra::DVector;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::network::{encode_input, input_width};
use super::{GuidanceNetwork, GuidanceProblem, NetworkHeader, NetworkKind, TimeMode};
use crate::analytic::{diffuse_marginal, GaussianMixture, Prompt};
use crate::error::{Error, Result};
use crate::neural::{AdamState, Head, Mlp, ParamAverage};
use crate::numeric::{rng_from_seed, Rng};
use crate::rewards::TiltedDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaWeight {
    Constant,
    /// `λ(t) = σ_t²`, which keeps the kernel-score noise bounded as `t → 0`.
    Sigma2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyMode {
    /// `‖s_p(x'_t) + ∇log h(x'_t) - ∇log q(x'_t | x'_0)‖²` with tilted `x'_0`.
    Algorithm,
    /// `‖∇log h(x'_t)‖²`, what remains of the kernel-score form once the
    /// first and last terms cancel.
    GradientPenalty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch: usize,
    pub lr: f64,
    /// When set, the learning rate decays geometrically to this value.
    pub lr_final: Option<f64>,
    /// When set, the returned network carries an exponential moving average
    /// of the parameters with this decay.
    pub ema: Option<f64>,
    pub eta: f64,
    pub lambda: LambdaWeight,
    pub time_mode: TimeMode,
    pub consistency: ConsistencyMode,
    pub hidden: Vec<usize>,
    /// Lower end of the uniform time draw.
    pub t_min: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            samples_per_epoch: 4096,
            batch: 64,
            lr: 1e-3,
            lr_final: None,
            ema: None,
            eta: 1.0,
            lambda: LambdaWeight::Constant,
            time_mode: TimeMode::Uniform,
            consistency: ConsistencyMode::Algorithm,
            hidden: vec![64, 64],
            t_min: 1e-3,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self, horizon: f64) -> Result<()> {
        let bad = |m: &str| Err(Error::Input(format!("training config: {m}")));
        if self.epochs == 0 || self.samples_per_epoch == 0 {
            return bad("epochs and samples_per_epoch must be ≥ 1");
        }
        if self.batch == 0 {
            return bad("batch must be ≥ 1");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be > 0");
        }
        if let Some(l) = self.lr_final {
            if !(l > 0.0) || !l.is_finite() {
                return bad("lr_final must be > 0");
            }
        }
        if let Some(e) = self.ema {
            if !(0.0..1.0).contains(&e) {
                return bad("ema must lie in [0, 1)");
            }
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return bad("eta must be ≥ 0");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be ≥ 1");
        }
        if self.time_mode == TimeMode::Uniform && !(self.t_min > 0.0 && self.t_min < horizon) {
            return bad("t_min must lie in (0, T)");
        }
        Ok(())
    }

    pub(crate) fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_final {
            Some(fin) if total > 1 => self.lr * (fin / self.lr).powf(step as f64 / (total - 1) as f64),
            _ => self.lr,
        }
    }

    pub(crate) fn averager(&self, n_params: usize) -> Result<Option<ParamAverage>> {
        self.ema.map(|d| ParamAverage::new(n_params, d)).transpose()
    }

    pub(crate) fn draw_time(&self, horizon: f64, rng: &mut Rng) -> f64 {
        match self.time_mode {
            TimeMode::OneStep => horizon,
            TimeMode::Uniform => self.t_min + (horizon - self.t_min) * rng.random::<f64>(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_guidance: f64,
    pub l_consistence: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridPoint {
    pub x: Vec<f64>,
    pub prompt: Prompt,
    pub t: f64,
    pub h: f64,
    pub h_exact: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochLog>,
    /// `‖h - h*‖/‖h*‖` over the evaluation grid.
    pub grid_rel_l2_h: Option<f64>,
    /// `‖∇log h - g*‖/‖g*‖` over the evaluation grid.
    pub grid_rel_l2_grad: Option<f64>,
    pub grid: Vec<GridPoint>,
}

/// Half-width of the evaluation grid, in marginal standard deviations.
pub const GRID_HALF_WIDTH: f64 = 2.0;

/// Evaluation points within `±GRID_HALF_WIDTH` marginal standard deviations
/// of the marginal mean of each prompt, at a handful of times.
pub fn evaluation_grid(problem: &GuidanceProblem, prompts: &[Prompt], mode: TimeMode) -> Result<Vec<(DVector<f64>, Prompt, f64)>> {
    let horizon = problem.sched.horizon;
    let times: Vec<f64> = match mode {
        TimeMode::OneStep => vec![horizon],
        TimeMode::Uniform => [0.05, 0.1, 0.25, 0.5, 0.75, 1.0].iter().map(|f| f * horizon).collect(),
    };
    let d = problem.dim();
    let per_axis = if d == 1 { 61 } else { 15 };
    let mut out = Vec::new();
    for &y in prompts {
        for &t in &times {
            let marg = diffuse_marginal(problem.gm(y)?, &problem.sched, t)?;
            let (m, c) = (marg.mean(), marg.covariance());
            let axes: Vec<Vec<f64>> = (0..d)
                .map(|k| {
                    let sd = c[(k, k)].sqrt();
                    (0..per_axis)
                        .map(|i| m[k] - GRID_HALF_WIDTH * sd + 2.0 * GRID_HALF_WIDTH * sd * i as f64 / (per_axis - 1) as f64)
                        .collect()
                })
                .collect();
            if d == 1 {
                out.extend(axes[0].iter().map(|x| (DVector::from_element(1, *x), y, t)));
            } else {
                for a in &axes[0] {
                    for b in &axes[1] {
                        let mut x = DVector::zeros(d);
                        x[0] = *a;
                        x[1] = *b;
                        out.push((x, y, t));
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn standard_normal(d: usize, rng: &mut Rng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Marginal scores at arbitrary `t` (cached for the one-step mode).
struct MarginalScores<'a> {
    problem: &'a GuidanceProblem,
    fixed: Vec<Option<GaussianMixture>>,
}

impl<'a> MarginalScores<'a> {
    fn new(problem: &'a GuidanceProblem, mode: TimeMode) -> Result<Self> {
        let fixed = (0..problem.registry.len())
            .map(|k| match mode {
                TimeMode::OneStep => diffuse_marginal(problem.gm(Prompt(k))?, &problem.sched, problem.sched.horizon).map(Some),
                TimeMode::Uniform => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { problem, fixed })
    }

    fn score(&self, y: Prompt, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.fixed[y.0] {
            Some(m) => m.score(x),
            None => diffuse_marginal(self.problem.gm(y)?, &self.problem.sched, t)?.score(x),
        }
    }
}

struct Sample {
    input: Vec<f64>,
    target: f64,
    /// Consistency pair: encoded `x'_t`, kernel-score residual offset, `λ(t)`.
    cons: Option<(Vec<f64>, DVector<f64>, f64)>,
}

/// Fit a positive network `h(x_t, y, t)` to `exp(r(x₀)/β)` by squared loss,
/// optionally with the consistency penalty, using Adam.
pub fn train_guidance_network(
    problem: &GuidanceProblem,
    prompts: &[Prompt],
    cfg: &TrainingConfig,
) -> Result<(GuidanceNetwork, TrainingReport)> {
    let horizon = problem.sched.horizon;
    cfg.validate(horizon)?;
    if prompts.is_empty() {
        return Err(Error::Input("training needs at least one prompt".into()));
    }
    for y in prompts {
        problem.gm(*y)?;
    }
    let d = problem.dim();
    let n_prompts = problem.registry.len();
    let beta = problem.reward.beta();
    let tilted: Vec<Option<TiltedDistribution>> = if cfg.eta > 0.0 {
        (0..n_prompts).map(|k| problem.tilted(Prompt(k)).map(Some)).collect::<Result<_>>()?
    } else {
        vec![None; n_prompts]
    };
    let scores = MarginalScores::new(problem, cfg.time_mode)?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut widths = vec![input_width(d, n_prompts, cfg.time_mode)];
    widths.extend(&cfg.hidden);
    widths.push(1);
    let mut net = Mlp::xavier(&widths, Head::Exp, &mut rng)?;
    let mut adam = AdamState::new(net.n_params(), cfg.lr);
    let mut avg = cfg.averager(net.n_params())?;
    let batches_per_epoch = cfg.samples_per_epoch.div_ceil(cfg.batch);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut grad = vec![0.0; net.n_params()];
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let samples = (0..cfg.samples_per_epoch)
            .map(|_| draw_sample(problem, prompts, cfg, &tilted, &scores, &mut rng, beta))
            .collect::<Result<Vec<_>>>()?;
        let (mut lg_sum, mut lc_sum) = (0.0, 0.0);
        for chunk in samples.chunks(cfg.batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let b = chunk.len() as f64;
            for s in chunk {
                // forward pass for the loss value, backward with the residual
                let h = net.forward(&s.input)?[0];
                let r = h - s.target;
                lg_sum += r * r;
                net.accumulate_grad_params(&s.input, &[2.0 * r / b], &mut grad)?;
                if let Some((input, offset, lambda)) = &s.cons {
                    let (_, gx) = net.logit_and_grad_input(input)?;
                    let res: DVector<f64> = match cfg.consistency {
                        ConsistencyMode::Algorithm => offset + DVector::from_column_slice(&gx[..d]),
                        ConsistencyMode::GradientPenalty => DVector::from_column_slice(&gx[..d]),
                    };
                    lc_sum += lambda * res.norm_squared();
                    let mut v = vec![0.0; input.len()];
                    for k in 0..d {
                        v[k] = 2.0 * cfg.eta * lambda * res[k] / b;
                    }
                    net.accumulate_mixed_grad(input, &v, 1.0, &mut grad)?;
                }
            }
            adam.lr = cfg.lr_at(step, total_steps);
            adam.step(net.params_mut(), &grad).map_err(|e| {
                Error::Diverged(format!("epoch {epoch}, step {step}: {e}"))
            })?;
            if let Some(a) = avg.as_mut() {
                a.update(net.params());
            }
            step += 1;
        }
        let n = samples.len() as f64;
        let log = EpochLog {
            epoch,
            l_guidance: lg_sum / n,
            l_consistence: lc_sum / n,
        };
        if !log.l_guidance.is_finite() || !log.l_consistence.is_finite() {
            return Err(Error::Diverged(format!(
                "epoch {epoch}: L_guidance={}, L_consistence={}",
                log.l_guidance, log.l_consistence
            )));
        }
        logs.push(log);
    }
    if let Some(p) = avg.and_then(|a| a.averaged()) {
        net.params_mut().copy_from_slice(&p);
    }
    let header = NetworkHeader::for_problem(problem, NetworkKind::Guidance, cfg.time_mode);
    let network = GuidanceNetwork::new(header, net)?;
    let (grid, rel_h, rel_g) = grid_report(problem, prompts, &network)?;
    Ok((
        network,
        TrainingReport {
            epochs: logs,
            grid_rel_l2_h: rel_h,
            grid_rel_l2_grad: rel_g,
            grid,
        },
    ))
}

fn draw_sample(
    problem: &GuidanceProblem,
    prompts: &[Prompt],
    cfg: &TrainingConfig,
    tilted: &[Option<TiltedDistribution>],
    scores: &MarginalScores,
    rng: &mut Rng,
    beta: f64,
) -> Result<Sample> {
    let horizon = problem.sched.horizon;
    let d = problem.dim();
    let n_prompts = problem.registry.len();
    let y = prompts[rng.random_range(0..prompts.len())];
    let t = cfg.draw_time(horizon, rng);
    let (a, s) = (problem.sched.alpha(t), problem.sched.sigma(t));
    let x0 = problem.gm(y)?.sample(rng);
    let xt = &x0 * a + standard_normal(d, rng) * s;
    let input = encode_input(&xt, y, n_prompts, t, horizon, cfg.time_mode);
    let target = (problem.reward.value(&x0) / beta).exp();
    if !target.is_finite() {
        return Err(Error::Numeric(format!("regression target exp(r/β) overflowed at r={}", problem.reward.value(&x0))));
    }
    let cons = match &tilted[y.0] {
        Some(q) => {
            let tp = cfg.draw_time(horizon, rng);
            let (ap, sp) = (problem.sched.alpha(tp), problem.sched.sigma(tp));
            let x0p = q.sample(rng)?;
            let eps = standard_normal(d, rng);
            let xtp = &x0p * ap + &eps * sp;
            // s_p(x'_t) - ∇log q(x'_t | x'_0) = s_p + ε/σ
            let offset = scores.score(y, tp, &xtp)? + eps / sp;
            let lambda = match cfg.lambda {
                LambdaWeight::Constant => 1.0,
                LambdaWeight::Sigma2 => sp * sp,
            };
            Some((encode_input(&xtp, y, n_prompts, tp, horizon, cfg.time_mode), offset, lambda))
        }
        None => None,
    };
    Ok(Sample { input, target, cons })
}

type GridSummary = (Vec<GridPoint>, Option<f64>, Option<f64>);

fn grid_report(problem: &GuidanceProblem, prompts: &[Prompt], network: &GuidanceNetwork) -> Result<GridSummary> {
    let pts = evaluation_grid(problem, prompts, network.header.time_mode)?;
    let mut grid = Vec::with_capacity(pts.len());
    let (mut eh, mut nh, mut eg, mut ng) = (0.0, 0.0, 0.0, 0.0);
    let mut exact_ok = true;
    let mut cache: Option<(Prompt, f64, super::TimeSlice)> = None;
    for (x, y, t) in pts {
        if cache.as_ref().map(|c| (c.0, c.1)) != Some((y, t)) {
            cache = Some((y, t, problem.slice(y, t)?));
        }
        let slice = &cache.as_ref().unwrap().2;
        let h = network.h(&x, y, t)?;
        let st = slice.state(&x)?;
        let h_exact = match slice.exact_with_log_g(&st) {
            Ok((g, log_g)) => {
                let hx = log_g.exp();
                eh += (h - hx).powi(2);
                nh += hx * hx;
                let gn = network.guidance(&x, y, t)?;
                eg += (gn - &g).norm_squared();
                ng += g.norm_squared();
                Some(hx)
            }
            Err(Error::Unsupported(_)) => {
                exact_ok = false;
                None
            }
            Err(e) => return Err(e),
        };
        grid.push(GridPoint {
            x: x.iter().copied().collect(),
            prompt: y,
            t,
            h,
            h_exact,
        });
    }
    let rel = |e: f64, n: f64| if exact_ok && n > 0.0 { Some((e / n).sqrt()) } else { None };
    // a zero exact field (constant reward) has no relative error; report absolute
    let rel_g = if exact_ok && ng == 0.0 { Some(eg.sqrt()) } else { rel(eg, ng) };
    Ok((grid, rel(eh, nh), rel_g))
}
