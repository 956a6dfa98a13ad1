//! Sample-quality metrics: MMD two-sample test, reward summaries and
//! density diagnostics.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytic::GaussianMixture;
use crate::error::{Error, Result};
use crate::numeric::rng_from_seed;
use crate::rewards::{expected_reward, Reward, TiltedDistribution};

pub const MMD_PERMUTATIONS: usize = 200;
pub const MMD_ALPHA: f64 = 0.01;
pub const MMD_MIN_SAMPLES: usize = 50;
/// Points used for the median-distance bandwidth.
pub const BANDWIDTH_SUBSAMPLE: usize = 2000;
const ROW_BLOCK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdResult {
    /// Unbiased MMD² estimate.
    pub statistic: f64,
    /// `1 - α` quantile of the permutation distribution.
    pub threshold: f64,
    pub p_value: f64,
    pub bandwidth: f64,
    pub permutations: usize,
    pub alpha: f64,
    pub n_x: usize,
    pub n_y: usize,
}

impl MmdResult {
    pub fn rejects(&self) -> bool {
        self.statistic > self.threshold
    }
}

fn fingerprint(xs: &[DVector<f64>]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((xs.len() as u64).to_le_bytes());
    for x in xs {
        for v in x.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().into()
}

fn median_distance(z: &[&DVector<f64>]) -> f64 {
    let stride = z.len().div_ceil(BANDWIDTH_SUBSAMPLE).max(1);
    let sub: Vec<&DVector<f64>> = z.iter().step_by(stride).copied().collect();
    let mut d = Vec::with_capacity(sub.len() * (sub.len() - 1) / 2);
    for i in 0..sub.len() {
        for j in i + 1..sub.len() {
            d.push((sub[i] - sub[j]).norm());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m
}

/// Unbiased MMD² with a Gaussian kernel at the median-distance bandwidth,
/// with a label-permutation null.
///
/// The pair is put in a canonical order first, so `mmd_rbf(x, y, s)` and
/// `mmd_rbf(y, x, s)` agree bit for bit.
pub fn mmd_rbf(x: &[DVector<f64>], y: &[DVector<f64>], seed: u64) -> Result<MmdResult> {
    if x.len() < MMD_MIN_SAMPLES || y.len() < MMD_MIN_SAMPLES {
        return Err(Error::Input(format!(
            "MMD needs at least {MMD_MIN_SAMPLES} samples per side (got {} and {})",
            x.len(),
            y.len()
        )));
    }
    let d = x[0].len();
    if let Some(v) = x.iter().chain(y).find(|v| v.len() != d) {
        return Err(Error::Dimension { expected: d, got: v.len() });
    }
    if x.iter().chain(y).any(|v| v.iter().any(|c| !c.is_finite())) {
        return Err(Error::Numeric("MMD input contains non-finite values".into()));
    }
    let (a, b) = if fingerprint(x) <= fingerprint(y) { (x, y) } else { (y, x) };
    let z: Vec<&DVector<f64>> = a.iter().chain(b).collect();
    let n = z.len();
    let (na, nb) = (a.len(), b.len());
    let bw = median_distance(&z);
    if !(bw > 0.0) {
        return Err(Error::Numeric("MMD bandwidth is zero: all points coincide".into()));
    }
    let gamma = 1.0 / (2.0 * bw * bw);

    // column 0: observed split, columns 1..: permutations, last: all ones
    let m = MMD_PERMUTATIONS;
    let mut rng = rng_from_seed(seed);
    let mut labels = DMatrix::<f64>::zeros(n, m + 2);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..na {
        labels[(i, 0)] = 1.0;
    }
    for p in 1..=m {
        idx.shuffle(&mut rng);
        for &i in &idx[..na] {
            labels[(i, p)] = 1.0;
        }
    }
    for i in 0..n {
        labels[(i, m + 1)] = 1.0;
    }

    // s_aa[p] = 1_Aᵀ K 1_A, s_a1[p] = 1_Aᵀ K 1, total = 1ᵀ K 1
    let mut s_aa = vec![0.0; m + 1];
    let mut s_a1 = vec![0.0; m + 1];
    let mut total = 0.0;
    let zmat = DMatrix::from_fn(n, d, |i, k| z[i][k]);
    let sq: Vec<f64> = z.iter().map(|v| v.norm_squared()).collect();
    for r0 in (0..n).step_by(ROW_BLOCK) {
        let r1 = (r0 + ROW_BLOCK).min(n);
        let rows = zmat.rows(r0, r1 - r0);
        let gram = rows * zmat.transpose();
        let k = DMatrix::from_fn(r1 - r0, n, |i, j| {
            let d2 = (sq[r0 + i] + sq[j] - 2.0 * gram[(i, j)]).max(0.0);
            (-gamma * d2).exp()
        });
        let kl = &k * &labels;
        for i in 0..r1 - r0 {
            let row_total = kl[(i, m + 1)];
            total += row_total;
            for p in 0..=m {
                if labels[(r0 + i, p)] == 1.0 {
                    s_aa[p] += kl[(i, p)];
                    s_a1[p] += row_total;
                }
            }
        }
    }
    let stat = |p: usize| {
        let (na_f, nb_f) = (na as f64, nb as f64);
        let saa = s_aa[p];
        let sab = s_a1[p] - saa;
        let sbb = total - saa - 2.0 * sab;
        // the kernel diagonal is exactly 1
        (saa - na_f) / (na_f * (na_f - 1.0)) + (sbb - nb_f) / (nb_f * (nb_f - 1.0)) - 2.0 * sab / (na_f * nb_f)
    };
    let statistic = stat(0);
    let mut null: Vec<f64> = (1..=m).map(stat).collect();
    null.sort_by(|a, b| a.total_cmp(b));
    let q = ((1.0 - MMD_ALPHA) * m as f64).ceil() as usize;
    let threshold = null[q.clamp(1, m) - 1];
    let exceed = null.iter().filter(|v| **v >= statistic).count();
    Ok(MmdResult {
        statistic,
        threshold,
        p_value: (1 + exceed) as f64 / (1 + m) as f64,
        bandwidth: bw,
        permutations: m,
        alpha: MMD_ALPHA,
        n_x: x.len(),
        n_y: y.len(),
    })
}

/// Streaming mean and variance.
#[derive(Debug, Clone, Copy, Default)]
pub struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, v: f64) {
        self.n += 1;
        let delta = v - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (v - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance (0 for fewer than two values).
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std_err(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSummary {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
    /// `E_q[r]` under the closed-form tilted target, when available.
    pub closed_form: Option<f64>,
}

/// Sample mean of the reward with `SE = sd/√n`.
pub fn mean_reward(xs: &[DVector<f64>], reward: &Reward) -> Result<RewardSummary> {
    if xs.is_empty() {
        return Err(Error::Input("mean reward of an empty batch".into()));
    }
    let mut w = Welford::default();
    for x in xs {
        crate::error::check_dim(reward.dim(), x.len())?;
        w.push(reward.value(x));
    }
    Ok(RewardSummary {
        mean: w.mean(),
        se: w.std_err(),
        n: xs.len(),
        closed_form: None,
    })
}

/// Same, with the closed-form expectation under `target` attached when it
/// has one.
pub fn mean_reward_against(xs: &[DVector<f64>], reward: &Reward, target: &TiltedDistribution) -> Result<RewardSummary> {
    let mut s = mean_reward(xs, reward)?;
    s.closed_form = match target.closed_form() {
        Some(gm) => Some(expected_reward(gm, reward)?),
        None => None,
    };
    Ok(s)
}

pub fn avg_log_density(xs: &[DVector<f64>], target: &GaussianMixture) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Input("log density of an empty batch".into()));
    }
    let mut w = Welford::default();
    for x in xs {
        w.push(target.log_density(x)?);
    }
    Ok(w.mean())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EssSummary {
    pub evaluations: usize,
    pub min: f64,
    pub mean: f64,
    /// Proposal size `K`.
    pub k: usize,
    /// Evaluations with `ESS/K` below the warning fraction.
    pub low: usize,
}

impl EssSummary {
    pub fn from_values(values: &[f64], k: usize, warn_fraction: f64) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut w = Welford::default();
        values.iter().for_each(|v| w.push(*v));
        Some(Self {
            evaluations: values.len(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            mean: w.mean(),
            k,
            low: values.iter().filter(|v| **v / (k as f64) < warn_fraction).count(),
        })
    }
}

/// Everything reported for one generated batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub reward: RewardSummary,
    pub mmd: Option<MmdResult>,
    /// Floor applied to a negative unbiased MMD² for display.
    pub mmd_floored: Option<f64>,
    pub avg_log_density_under_target: Option<f64>,
    pub ess: Option<EssSummary>,
    pub warnings: Vec<String>,
}

/// Evaluate `xs` against reference samples from the target and, when the
/// target density is closed-form, its log density.
pub fn evaluate(
    xs: &[DVector<f64>],
    reward: &Reward,
    target: &TiltedDistribution,
    reference: Option<&[DVector<f64>]>,
    seed: u64,
) -> Result<EvalReport> {
    let reward_s = mean_reward_against(xs, reward, target)?;
    let mmd = match reference {
        Some(r) => Some(mmd_rbf(xs, r, seed)?),
        None => None,
    };
    let avg_ld = match target.closed_form() {
        Some(gm) => Some(avg_log_density(xs, gm)?),
        None => None,
    };
    Ok(EvalReport {
        n: xs.len(),
        reward: reward_s,
        mmd_floored: mmd.as_ref().map(|m| m.statistic.max(0.0)),
        mmd,
        avg_log_density_under_target: avg_ld,
        ess: None,
        warnings: Vec::new(),
    })
}
