use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::network::{encode_input, input_width};
use super::train::{evaluation_grid, standard_normal, EpochLog};
use super::{GuidanceNetwork, GuidanceProblem, NetworkHeader, NetworkKind, TimeMode, TrainingConfig};
use crate::analytic::Prompt;
use crate::error::{Error, Result};
use crate::neural::{AdamState, Head, Mlp};
use crate::numeric::rng_from_seed;

/// Samples whose importance factor exceeds `exp(MAX_LOG_WEIGHT)` are skipped.
const MAX_LOG_WEIGHT: f64 = 700.0;
const MAX_SKIP_RATE: f64 = 0.1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradFieldReport {
    pub epochs: Vec<EpochLog>,
    pub skipped: usize,
    pub total: usize,
    /// Relative L2 error against the exact guidance on a uniform grid.
    pub grid_rel_l2: Option<f64>,
    /// Same, weighted by the marginal density at `T`.
    pub density_weighted_rel_l2: Option<f64>,
}

/// Regress a vector-valued network onto the exact guidance at `t = T` without
/// differentiating the reward.
///
/// Per joint draw `(x₀, x_T)` the target is
/// `exp(r(x₀)/β) / Ĝ(x_T) · ∇_{x_T} log p(x₀ | x_T)` with
/// `Ĝ(x_T) = E[exp(r/β) | x_T]`; its conditional mean given `x_T` is
/// `∇ log Ĝ(x_T)`, so the squared-loss minimizer is the guidance field.
pub fn train_grad_field_net(
    problem: &GuidanceProblem,
    prompts: &[Prompt],
    cfg: &TrainingConfig,
) -> Result<(GuidanceNetwork, GradFieldReport)> {
    if cfg.time_mode != TimeMode::OneStep {
        return Err(Error::Validation("gradient-field regression requires the one-step time mode".into()));
    }
    let horizon = problem.sched.horizon;
    cfg.validate(horizon)?;
    if prompts.is_empty() {
        return Err(Error::Input("training needs at least one prompt".into()));
    }
    let d = problem.dim();
    let n_prompts = problem.registry.len();
    let beta = problem.reward.beta();
    let slices = (0..n_prompts)
        .map(|k| problem.slice(Prompt(k), horizon))
        .collect::<Result<Vec<_>>>()?;
    let (a, s) = (problem.sched.alpha(horizon), problem.sched.sigma(horizon));
    // natural magnitude of ∇_{x_T} log p(x₀ | x_T) per unit of x₀
    let output_scale = a / (s * s);
    let mut rng = rng_from_seed(cfg.seed);
    let mut widths = vec![input_width(d, n_prompts, TimeMode::OneStep)];
    widths.extend(&cfg.hidden);
    widths.push(d);
    let mut net = Mlp::xavier(&widths, Head::Identity, &mut rng)?;
    let mut adam = AdamState::new(net.n_params(), cfg.lr);
    let mut avg = cfg.averager(net.n_params())?;
    let total_steps = cfg.epochs * cfg.samples_per_epoch.div_ceil(cfg.batch);
    let mut grad = vec![0.0; net.n_params()];
    let (mut skipped, mut total, mut step) = (0usize, 0usize, 0usize);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut samples = Vec::with_capacity(cfg.samples_per_epoch);
        for _ in 0..cfg.samples_per_epoch {
            total += 1;
            let y = prompts[rng.random_range(0..prompts.len())];
            let slice = &slices[y.0];
            let x0 = problem.gm(y)?.sample(&mut rng);
            let xt = &x0 * a + standard_normal(d, &mut rng) * s;
            let st = slice.state(&xt)?;
            let (_, log_g) = slice.exact_with_log_g(&st)?;
            let log_w = problem.reward.value(&x0) / beta - log_g;
            if !log_w.is_finite() || log_w > MAX_LOG_WEIGHT {
                skipped += 1;
                continue;
            }
            let kernel_grad = -(&xt - &x0 * a) / (s * s) - &st.score;
            let target = kernel_grad * log_w.exp();
            samples.push((encode_input(&xt, y, n_prompts, horizon, horizon, TimeMode::OneStep), target));
        }
        if skipped as f64 > MAX_SKIP_RATE * total as f64 {
            return Err(Error::Numeric(format!(
                "gradient-field regression skipped {skipped}/{total} samples with overflowing weights"
            )));
        }
        let mut loss_sum = 0.0;
        for chunk in samples.chunks(cfg.batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let b = chunk.len() as f64;
            for (input, target) in chunk {
                let out = net.forward(input)?;
                let dout: Vec<f64> = (0..d)
                    .map(|k| {
                        let r = output_scale * out[k] - target[k];
                        loss_sum += r * r;
                        2.0 * output_scale * r / b
                    })
                    .collect();
                net.accumulate_grad_params(input, &dout, &mut grad)?;
            }
            adam.lr = cfg.lr_at(step, total_steps);
            adam.step(net.params_mut(), &grad)
                .map_err(|e| Error::Diverged(format!("epoch {epoch}, step {step}: {e}")))?;
            if let Some(a) = avg.as_mut() {
                a.update(net.params());
            }
            step += 1;
        }
        let l = loss_sum / samples.len().max(1) as f64;
        if !l.is_finite() {
            return Err(Error::Diverged(format!("epoch {epoch}: loss {l}")));
        }
        logs.push(EpochLog {
            epoch,
            l_guidance: l,
            l_consistence: 0.0,
        });
    }
    if let Some(p) = avg.and_then(|a| a.averaged()) {
        net.params_mut().copy_from_slice(&p);
    }
    let mut header = NetworkHeader::for_problem(problem, NetworkKind::GradField, TimeMode::OneStep);
    header.output_scale = output_scale;
    let network = GuidanceNetwork::new(header, net)?;

    let (mut e, mut n, mut ew, mut nw) = (0.0, 0.0, 0.0, 0.0);
    for (x, y, t) in evaluation_grid(problem, prompts, TimeMode::OneStep)? {
        let slice = &slices[y.0];
        let st = slice.state(&x)?;
        let exact = slice.exact(&st)?;
        let diff = (network.guidance(&x, y, t)? - &exact).norm_squared();
        let w = st.log_marginal.exp();
        e += diff;
        n += exact.norm_squared();
        ew += w * diff;
        nw += w * exact.norm_squared();
    }
    let rel = |e: f64, n: f64| if n > 0.0 { (e / n).sqrt() } else { e.sqrt() };
    Ok((
        network,
        GradFieldReport {
            epochs: logs,
            skipped,
            total,
            grid_rel_l2: Some(rel(e, n)),
            density_weighted_rel_l2: Some(rel(ew, nw)),
        },
    ))
}
