use std::io::{BufRead, Write};

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Reward, RewardKind};
use crate::analytic::{GaussianMixture, Prompt};
use crate::error::{check_dim, Error, Result};
use crate::numeric::{rng_from_seed, sigmoid, softplus};

pub const BT_STEP: f64 = 0.1;
pub const BT_ITERS: usize = 5000;
pub const BT_L2: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub prompt: Prompt,
    pub x_w: Vec<f64>,
    pub x_l: Vec<f64>,
}

/// A drawn pair in draw order together with its logistic label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub x_a: DVector<f64>,
    pub x_b: DVector<f64>,
    pub a_wins: bool,
}

impl LabeledPair {
    pub fn to_pair(&self, prompt: Prompt) -> PreferencePair {
        let (w, l) = if self.a_wins {
            (&self.x_a, &self.x_b)
        } else {
            (&self.x_b, &self.x_a)
        };
        PreferencePair {
            prompt,
            x_w: w.iter().copied().collect(),
            x_l: l.iter().copied().collect(),
        }
    }
}

/// Draw `n` pairs from `gm` and label them with `P(a wins) = σ(r(a) - r(b))`.
pub fn synth_labeled_pairs(gm: &GaussianMixture, r: &Reward, n: usize, seed: u64) -> Result<Vec<LabeledPair>> {
    if n == 0 {
        return Err(Error::Input("need at least one preference pair".into()));
    }
    check_dim(gm.dim(), r.dim())?;
    let mut rng = rng_from_seed(seed);
    Ok((0..n)
        .map(|_| {
            let x_a = gm.sample(&mut rng);
            let x_b = gm.sample(&mut rng);
            let u: f64 = rng.random();
            let a_wins = u < sigmoid(r.value(&x_a) - r.value(&x_b));
            LabeledPair { x_a, x_b, a_wins }
        })
        .collect())
}

pub fn synth_preferences(
    gm: &GaussianMixture,
    r: &Reward,
    y: Prompt,
    n: usize,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    Ok(synth_labeled_pairs(gm, r, n, seed)?
        .iter()
        .map(|p| p.to_pair(y))
        .collect())
}

#[derive(Debug, Clone)]
pub struct BtFit {
    pub reward: Reward,
    pub loss: f64,
    /// Penalized loss before each iteration, then after the last.
    pub loss_history: Vec<f64>,
}

fn differences(pairs: &[PreferencePair], d: usize) -> Result<Vec<DVector<f64>>> {
    if pairs.is_empty() {
        return Err(Error::Input("need at least one preference pair".into()));
    }
    pairs
        .iter()
        .map(|p| {
            check_dim(d, p.x_w.len())?;
            check_dim(d, p.x_l.len())?;
            Ok(DVector::from_iterator(d, p.x_w.iter().zip(&p.x_l).map(|(w, l)| w - l)))
        })
        .collect()
}

fn loss_and_grad(diffs: &[DVector<f64>], a: &DVector<f64>) -> (f64, DVector<f64>) {
    let n = diffs.len() as f64;
    let mut loss = 0.0;
    let mut grad = DVector::zeros(a.len());
    for dx in diffs {
        let m = a.dot(dx);
        loss += softplus(-m);
        grad -= dx * sigmoid(-m);
    }
    loss = loss / n + BT_L2 * a.norm_squared();
    grad = grad / n + a * (2.0 * BT_L2);
    (loss, grad)
}

/// Penalized Bradley–Terry negative log-likelihood of a linear reward `a`.
pub fn bt_loss(pairs: &[PreferencePair], a: &DVector<f64>) -> Result<f64> {
    let diffs = differences(pairs, a.len())?;
    Ok(loss_and_grad(&diffs, a).0)
}

/// Full-batch gradient descent on the Bradley–Terry likelihood over linear
/// rewards, started from `a = 0`.
pub fn fit_reward_bt(pairs: &[PreferencePair], d: usize) -> Result<BtFit> {
    let diffs = differences(pairs, d)?;
    let mut a = DVector::zeros(d);
    let mut history = Vec::with_capacity(BT_ITERS + 1);
    for it in 0..BT_ITERS {
        let (loss, grad) = loss_and_grad(&diffs, &a);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("Bradley–Terry loss became {loss} at iteration {it}")));
        }
        history.push(loss);
        a -= grad * BT_STEP;
    }
    let (loss, _) = loss_and_grad(&diffs, &a);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("final Bradley–Terry loss is {loss}")));
    }
    history.push(loss);
    Ok(BtFit {
        reward: Reward::new(RewardKind::LearnedLinear { a_hat: a }, 1.0)?,
        loss,
        loss_history: history,
    })
}

pub fn write_preferences_jsonl<W: Write>(mut w: W, pairs: &[PreferencePair]) -> Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_preferences_jsonl<R: BufRead>(r: R) -> Result<Vec<PreferencePair>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PreferencePair = serde_json::from_str(&line)
            .map_err(|e| Error::Input(format!("preference line {}: {e}", i + 1)))?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn std_normal() -> GaussianMixture {
        GaussianMixture::from_1d(&[(1.0, 0.0, 1.0)]).unwrap()
    }

    #[test]
    fn constant_reward_is_a_fair_coin() {
        let n = 20_000;
        let pairs = synth_labeled_pairs(&std_normal(), &Reward::constant(1, 3.0, 1.0).unwrap(), n, 9).unwrap();
        let rate = pairs.iter().filter(|p| p.a_wins).count() as f64 / n as f64;
        assert!((rate - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt(), "{rate}");
    }

    #[test]
    fn win_frequency_follows_logistic_per_bucket() {
        let n = 40_000;
        let a = 5.0;
        let pairs = synth_labeled_pairs(&std_normal(), &Reward::linear(v1(a), 1.0).unwrap(), n, 21).unwrap();
        // bucket by the reward gap; compare wins to the summed probabilities
        let edges = [-f64::INFINITY, -4.0, -1.0, -0.25, 0.25, 1.0, 4.0, f64::INFINITY];
        for w in edges.windows(2) {
            let (mut wins, mut expect, mut var, mut count) = (0.0, 0.0, 0.0, 0);
            for p in &pairs {
                let gap = a * (p.x_a[0] - p.x_b[0]);
                if gap >= w[0] && gap < w[1] {
                    let q = sigmoid(gap);
                    wins += p.a_wins as u8 as f64;
                    expect += q;
                    var += q * (1.0 - q);
                    count += 1;
                }
            }
            assert!(count > 100);
            assert!((wins - expect).abs() < 4.0 * var.sqrt().max(1.0), "bucket {w:?}");
        }
    }

    #[test]
    fn deterministic_and_shift_invariant() {
        let gm = std_normal();
        let r = Reward::linear(v1(1.5), 1.0).unwrap();
        let a = synth_preferences(&gm, &r, Prompt(0), 500, 4).unwrap();
        let b = synth_preferences(&gm, &r, Prompt(0), 500, 4).unwrap();
        assert_eq!(a, b);
        let shifted = r.clone().with_offset(17.0).unwrap();
        let c = synth_preferences(&gm, &shifted, Prompt(0), 500, 4).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn zero_reward_loss_is_ln2() {
        let pairs = synth_preferences(&std_normal(), &Reward::linear(v1(1.0), 1.0).unwrap(), Prompt(0), 50, 1).unwrap();
        let l = bt_loss(&pairs, &v1(0.0)).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn refit_recovers_linear_coefficient() {
        let pairs = synth_preferences(&std_normal(), &Reward::linear(v1(2.0), 1.0).unwrap(), Prompt(0), 10_000, 77).unwrap();
        let fit = fit_reward_bt(&pairs, 1).unwrap();
        let a_hat = fit.reward.linear_coeff().unwrap()[0];
        assert!((a_hat - 2.0).abs() < 0.15, "{a_hat}");
        assert_eq!(fit.loss_history.len(), BT_ITERS + 1);
    }

    #[test]
    fn separable_data_decreases_monotonically_with_bounded_norm() {
        let pairs: Vec<PreferencePair> = (0..200)
            .map(|i| {
                let x = -2.0 + 0.02 * i as f64;
                PreferencePair {
                    prompt: Prompt(0),
                    x_w: vec![x + 0.5],
                    x_l: vec![x],
                }
            })
            .collect();
        let fit = fit_reward_bt(&pairs, 1).unwrap();
        assert!(fit.loss_history.windows(2).all(|w| w[1] <= w[0]));
        let a = fit.reward.linear_coeff().unwrap()[0];
        assert!(a > 0.0 && a.is_finite());
    }

    #[test]
    fn jsonl_roundtrip() {
        let pairs = synth_preferences(&std_normal(), &Reward::linear(v1(1.0), 1.0).unwrap(), Prompt(2), 5, 0).unwrap();
        let mut buf = Vec::new();
        write_preferences_jsonl(&mut buf, &pairs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().starts_with(r#"{"prompt":2,"x_w":["#));
        let back = read_preferences_jsonl(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(pairs, back);
    }
}
