//! Gradient and oracle audits: every network gradient against central
//! differences, the Tweedie identity, VP schedule invariants and the exact
//! guidance identity against tilted marginals.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::analytic::{diffuse_marginal, diffusion_posterior, GaussianMixture, NoiseSchedule, Prompt};
use crate::error::Result;
use crate::guidance::{
    evaluation_grid, guidance_exact, GuidanceNetwork, GuidanceProblem, NetworkHeader, NetworkKind, TimeMode,
};
use crate::neural::{audit_grad_input, audit_grad_params, audit_mixed_grad, Head, Mlp};
use crate::numeric::rng_from_seed;
use crate::quadrature::trapezoid_1d;
use crate::rewards::{tilt_gm, Reward};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const TWEEDIE_TOLERANCE: f64 = 1e-8;
pub const SCHEDULE_TOLERANCE: f64 = 1e-12;
pub const IDENTITY_TOLERANCE: f64 = 1e-8;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditCheck {
    pub name: String,
    pub checked: usize,
    pub max_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl AuditCheck {
    fn new(name: &str, checked: usize, max_err: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            checked,
            max_err,
            tolerance,
            pass: checked > 0 && max_err < tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub checks: Vec<AuditCheck>,
    pub pass: bool,
}

struct Acc {
    checked: usize,
    max: f64,
}

impl Acc {
    fn new() -> Self {
        Self { checked: 0, max: 0.0 }
    }

    fn add(&mut self, checked: usize, err: f64) {
        self.checked += checked;
        self.max = self.max.max(err);
    }

    fn check(&self, name: &str, tol: f64) -> AuditCheck {
        AuditCheck::new(name, self.checked, self.max, tol)
    }
}

fn random_vec(n: usize, scale: f64, rng: &mut crate::numeric::Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Parameter, input and mixed gradients of randomly initialized MLPs.
fn mlp_checks(seed: u64) -> Result<Vec<AuditCheck>> {
    let mut rng = rng_from_seed(seed);
    let (mut params, mut inputs, mut mixed) = (Acc::new(), Acc::new(), Acc::new());
    for k in 0..12 {
        let head = if k % 2 == 0 { Head::Exp } else { Head::Identity };
        let out = if head == Head::Exp { 1 } else { 1 + k % 3 };
        let widths = [1 + k % 4, 4 + k % 5, 3 + k % 3, out];
        let net = Mlp::xavier(&widths, head, &mut rng)?;
        for _ in 0..3 {
            let x = random_vec(widths[0], 1.5, &mut rng);
            let dout = random_vec(out, 1.0, &mut rng);
            let r = audit_grad_params(&net, &x, &dout, FD_STEP)?;
            params.add(r.checked, r.max_rel_err);
            if head == Head::Exp {
                let r = audit_grad_input(&net, &x, FD_STEP)?;
                inputs.add(r.checked, r.max_rel_err);
                let v = random_vec(widths[0], 1.0, &mut rng);
                let r = audit_mixed_grad(&net, &x, &v, FD_STEP)?;
                mixed.add(r.checked, r.max_rel_err);
            }
        }
    }
    Ok(vec![
        params.check("mlp_param_gradients", GRAD_TOLERANCE),
        inputs.check("mlp_input_gradients", GRAD_TOLERANCE),
        mixed.check("mlp_mixed_gradients", GRAD_TOLERANCE),
    ])
}

fn canonical_problem() -> Result<GuidanceProblem> {
    GuidanceProblem::single(
        GaussianMixture::from_1d(&[(0.5, -3.0, 0.25), (0.5, 3.0, 0.25)])?,
        NoiseSchedule::default(),
        Reward::quadratic(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 3.0), 1.0)?,
    )
}

/// `∇ log h` and parameter gradients of a guidance network on its grid.
fn network_checks(net: &GuidanceNetwork, problem: &GuidanceProblem, seed: u64) -> Result<Vec<AuditCheck>> {
    let prompts: Vec<Prompt> = (0..problem.registry.len()).map(Prompt).collect();
    let grid = evaluation_grid(problem, &prompts, net.header.time_mode)?;
    let stride = grid.len().div_ceil(40).max(1);
    let pts: Vec<_> = grid.into_iter().step_by(stride).collect();
    let mut rng = rng_from_seed(seed);
    let mut params = Acc::new();
    for (x, y, t) in pts.iter().step_by(4) {
        let input = net.encode(x, *y, *t);
        let dout = random_vec(net.net.output_dim(), 1.0, &mut rng);
        let r = audit_grad_params(&net.net, &input, &dout, FD_STEP)?;
        params.add(r.checked, r.max_rel_err);
    }
    let mut out = vec![params.check("network_param_gradients", GRAD_TOLERANCE)];
    if net.header.kind == NetworkKind::Guidance {
        let r = net.audit(&pts)?;
        out.push(AuditCheck::new("network_input_gradients", r.checked, r.max_rel_err, GRAD_TOLERANCE));
    }
    Ok(out)
}

/// Posterior mean equals `(x_t + σ_t² ∇log p_t(x_t))/α_t`.
fn tweedie_check() -> Result<AuditCheck> {
    let sched = NoiseSchedule::default();
    let mixtures = [
        GaussianMixture::from_1d(&[(0.3, -2.0, 0.5), (0.7, 1.5, 1.2)])?,
        GaussianMixture::new(
            vec![0.5, 0.5],
            vec![DVector::from_vec(vec![2.0, 0.0]), DVector::from_vec(vec![-1.0, 1.0])],
            vec![
                DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.2]),
                DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.6]),
            ],
        )?,
    ];
    let mut acc = Acc::new();
    for gm in &mixtures {
        let d = gm.dim();
        for t in [0.01, 0.1, 0.4, 0.7, 1.0] {
            let post = diffusion_posterior(gm, &sched, t)?;
            let marg = diffuse_marginal(gm, &sched, t)?;
            for k in 0..7 {
                let xt = DVector::from_fn(d, |i, _| -2.5 + 0.8 * k as f64 + 0.3 * i as f64);
                let st = post.state(&xt)?;
                let tweedie = (&xt + marg.score(&xt)? * sched.sigma2(t)) / sched.alpha(t);
                acc.add(d, (st.posterior_mean() - tweedie).amax());
            }
        }
    }
    Ok(acc.check("tweedie_identity", TWEEDIE_TOLERANCE))
}

/// `α² + σ² = 1` and `log α = -½∫β`.
fn schedule_check() -> Result<AuditCheck> {
    let mut acc = Acc::new();
    for sched in [NoiseSchedule::default(), NoiseSchedule::new(0.5, 10.0, 2.0)?] {
        for i in 0..=100 {
            let t = sched.horizon * i as f64 / 100.0;
            let (a, s2) = (sched.alpha(t), sched.sigma2(t));
            acc.add(1, (a * a + s2 - 1.0).abs());
            // β is linear, so the trapezoid rule is exact up to rounding
            let int = trapezoid_1d(0.0, t, 3, |u| sched.beta(u));
            acc.add(1, (sched.log_alpha(t) + 0.5 * int).abs());
        }
    }
    Ok(acc.check("vp_schedule_invariants", SCHEDULE_TOLERANCE))
}

/// Exact guidance against `∇log q_t - ∇log p_t` from the diffused tilted
/// mixture, for conjugate rewards.
fn identity_check() -> Result<AuditCheck> {
    let sched = NoiseSchedule::default();
    let bimodal = GaussianMixture::from_1d(&[(0.4, -2.0, 0.3), (0.6, 1.5, 0.8)])?;
    let cases = [
        (bimodal.clone(), Reward::linear(DVector::from_element(1, 1.3), 0.7)?),
        (
            bimodal,
            Reward::quadratic(DMatrix::from_element(1, 1, 0.8), DVector::from_element(1, -0.5), 1.0)?,
        ),
    ];
    let mut acc = Acc::new();
    for (gm, r) in cases {
        let q = tilt_gm(&gm, &r)?;
        let q_gm = q.closed_form().expect("conjugate tilt").clone();
        let p = GuidanceProblem::single(gm.clone(), sched, r)?;
        for t in [0.05, 0.3, 1.0] {
            let (pt, qt) = (diffuse_marginal(&gm, &sched, t)?, diffuse_marginal(&q_gm, &sched, t)?);
            for k in 0..25 {
                let x = DVector::from_element(1, -4.0 + 8.0 * k as f64 / 24.0);
                let want = qt.score(&x)? - pt.score(&x)?;
                acc.add(1, (guidance_exact(&p, Prompt(0), &x, t)? - want).amax());
            }
        }
    }
    Ok(acc.check("exact_guidance_identity", IDENTITY_TOLERANCE))
}

/// Run every audit. `network` adds checks on a trained network; without one
/// a freshly initialized guidance network on a canonical problem is used.
pub fn run_audit(network: Option<(&GuidanceNetwork, &GuidanceProblem)>, seed: u64) -> Result<AuditSummary> {
    let mut checks = mlp_checks(seed)?;
    match network {
        Some((net, problem)) => checks.extend(network_checks(net, problem, seed)?),
        None => {
            let problem = canonical_problem()?;
            let header = NetworkHeader::for_problem(&problem, NetworkKind::Guidance, TimeMode::Uniform);
            let width = crate::guidance::input_width(1, 1, TimeMode::Uniform);
            let mlp = Mlp::xavier(&[width, 16, 16, 1], Head::Exp, &mut rng_from_seed(seed ^ 0x5eed))?;
            let net = GuidanceNetwork::new(header, mlp)?;
            checks.extend(network_checks(&net, &problem, seed)?);
        }
    }
    checks.push(tweedie_check()?);
    checks.push(schedule_check()?);
    checks.push(identity_check()?);
    let pass = checks.iter().all(|c| c.pass);
    Ok(AuditSummary { checks, pass })
}
