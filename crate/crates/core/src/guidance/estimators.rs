use nalgebra::DVector;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::TimeSlice;
use crate::analytic::PosteriorState;
use crate::error::{Error, Result};
use crate::numeric::{ess_from_log_weights, softmax, Rng};

/// How M1 differentiates through the posterior sampler.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum M1Mode {
    /// Pathwise gradient through `m_i(x_t) + L_i ε` plus a score-function term
    /// for the component draw (leave-one-out baseline).
    #[default]
    ScoreCorrected,
    /// Pathwise gradient only, component index frozen.
    Frozen,
}

#[derive(Debug, Clone)]
pub struct M1Estimate {
    pub grad: DVector<f64>,
    /// Delta-method standard error per coordinate.
    pub se: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct IsEstimate {
    pub grad: DVector<f64>,
    pub se: DVector<f64>,
    pub ess: f64,
    /// `Σ w̃_k`, 1 up to rounding.
    pub weight_sum: f64,
}

fn pick(resp: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, r) in resp.iter().enumerate() {
        acc += r;
        if u < acc {
            return i;
        }
    }
    resp.len() - 1
}

/// Ratio estimate `Σ_j N_j / Σ_j e_j` and its delta-method standard error.
fn ratio_with_se(num: &[DVector<f64>], e: &[f64]) -> (DVector<f64>, DVector<f64>) {
    let d = num[0].len();
    let total: f64 = e.iter().sum();
    let mut est = DVector::zeros(d);
    for n in num {
        est += n;
    }
    est /= total;
    let mut var = DVector::zeros(d);
    for (n, ej) in num.iter().zip(e) {
        let r = n - &est * *ej;
        var += r.component_mul(&r);
    }
    (est, var.map(|v| v.sqrt() / total))
}

impl TimeSlice<'_> {
    /// M1: `∇_{x_t} log (1/n)Σ exp(r(x₀ʲ)/β)` with `x₀ʲ` drawn from the exact
    /// posterior.
    pub fn m1(&self, st: &PosteriorState, n: usize, mode: M1Mode, rng: &mut Rng) -> Result<M1Estimate> {
        if n < 2 {
            return Err(Error::Input(format!("M1 needs n ≥ 2 (got {n})")));
        }
        let reward = &self.problem.reward;
        let beta = reward.beta();
        let comps = self.post.components();
        let mut log_e = Vec::with_capacity(n);
        let mut path = Vec::with_capacity(n);
        let mut idx = Vec::with_capacity(n);
        for _ in 0..n {
            let i = pick(&st.resp, rng.random());
            let x0 = &st.means[i] + comps[i].cov.sample(rng);
            log_e.push(reward.value(&x0) / beta);
            path.push(comps[i].gain.tr_mul(&(reward.gradient(&x0) / beta)));
            idx.push(i);
        }
        let max = log_e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = log_e.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = e.iter().sum();
        let num: Vec<DVector<f64>> = (0..n)
            .map(|j| {
                let mut v = &path[j] * e[j];
                if mode == M1Mode::ScoreCorrected {
                    let baseline = (total - e[j]) / (n - 1) as f64;
                    let i = idx[j];
                    v += (&st.comp_scores[i] - &st.score) * (e[j] - baseline);
                }
                v
            })
            .collect();
        let (grad, se) = ratio_with_se(&num, &e);
        Ok(M1Estimate { grad, se })
    }

    /// M2: `(1/β)·∇_{x_t} r(E[x₀ | x_t])`.
    pub fn m2(&self, st: &PosteriorState) -> DVector<f64> {
        let reward = &self.problem.reward;
        let m = st.posterior_mean();
        let jac = self.post.mean_jacobian(st);
        jac.tr_mul(&reward.gradient(&m)) / reward.beta()
    }

    /// Gradient-free self-normalized importance sampling with the data
    /// distribution as proposal.
    pub fn grad_free_is(&self, x: &DVector<f64>, st: &PosteriorState, k: usize, rng: &mut Rng) -> Result<IsEstimate> {
        if k < 2 {
            return Err(Error::Input(format!("importance sampling needs K ≥ 2 (got {k})")));
        }
        let reward = &self.problem.reward;
        let beta = reward.beta();
        let (a, s2) = (self.alpha(), self.sigma() * self.sigma());
        let gm = self.gm();
        let mut log_u = Vec::with_capacity(k);
        let mut grads = Vec::with_capacity(k);
        for _ in 0..k {
            let x0 = gm.sample(rng);
            let resid = x - &x0 * a;
            log_u.push(-resid.norm_squared() / (2.0 * s2) + reward.value(&x0) / beta);
            grads.push(-resid / s2 - &st.score);
        }
        let w = softmax(&log_u).ok_or_else(|| {
            Error::DegenerateWeights(format!("all {k} importance log-weights are -inf"))
        })?;
        let mut est = DVector::zeros(x.len());
        for (wk, g) in w.iter().zip(&grads) {
            est += g * *wk;
        }
        let mut var = DVector::zeros(x.len());
        for (wk, g) in w.iter().zip(&grads) {
            let r = g - &est;
            var += r.component_mul(&r) * (wk * wk);
        }
        Ok(IsEstimate {
            grad: est,
            se: var.map(f64::sqrt),
            ess: ess_from_log_weights(&log_u),
            weight_sum: w.iter().sum(),
        })
    }
}
