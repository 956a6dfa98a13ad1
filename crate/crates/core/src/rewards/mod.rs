//! Reward families, exponential tilting and Bradley–Terry preference fitting.

mod preference;
mod tilt;

pub use preference::{
    bt_loss, fit_reward_bt, read_preferences_jsonl, synth_labeled_pairs, synth_preferences,
    write_preferences_jsonl, BtFit, LabeledPair, PreferencePair, BT_ITERS, BT_L2, BT_STEP,
};
pub use tilt::{expected_reward, tilt_gm, TiltedDistribution, REJECTION_MIN_ACCEPTANCE};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::analytic::Prompt;
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum RewardKind {
    /// `a·x`
    Linear { a: DVector<f64> },
    /// `-½xᵀAx + b·x`
    Quadratic { a: DMatrix<f64>, b: DVector<f64> },
    /// `height·exp(-‖x - c‖²/(2·width²))`
    RbfBump {
        center: DVector<f64>,
        width: f64,
        height: f64,
    },
    /// Linear reward recovered from preference data.
    LearnedLinear { a_hat: DVector<f64> },
}

/// A reward `r(x, y) = kind(x) + offset` with inverse temperature `β`.
///
/// All families here ignore the prompt; per-prompt rewards are expressed by
/// the harness holding one reward per prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RewardDoc", into = "RewardDoc")]
pub struct Reward {
    kind: RewardKind,
    beta: f64,
    offset: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum KindDoc {
    Linear { a: Vec<f64> },
    Quadratic { a: Vec<Vec<f64>>, b: Vec<f64> },
    RbfBump { center: Vec<f64>, width: f64, height: f64 },
    LearnedLinear { a_hat: Vec<f64> },
}

/// Serialized form: `{"kind": {"linear": {"a": [..]}}, "beta": 1.0, "offset": 0.0}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardDoc {
    pub kind: KindDoc,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub offset: f64,
}

fn default_beta() -> f64 {
    1.0
}

impl TryFrom<RewardDoc> for Reward {
    type Error = Error;

    fn try_from(doc: RewardDoc) -> Result<Self> {
        let kind = match doc.kind {
            KindDoc::Linear { a } => RewardKind::Linear { a: DVector::from_vec(a) },
            KindDoc::LearnedLinear { a_hat } => RewardKind::LearnedLinear {
                a_hat: DVector::from_vec(a_hat),
            },
            KindDoc::Quadratic { a, b } => {
                let d = b.len();
                if a.len() != d || a.iter().any(|r| r.len() != d) {
                    return Err(Error::Input(format!("quadratic reward: A must be {d}×{d}")));
                }
                RewardKind::Quadratic {
                    a: DMatrix::from_fn(d, d, |i, j| a[i][j]),
                    b: DVector::from_vec(b),
                }
            }
            KindDoc::RbfBump {
                center,
                width,
                height,
            } => RewardKind::RbfBump {
                center: DVector::from_vec(center),
                width,
                height,
            },
        };
        Reward::new(kind, doc.beta)?.with_offset(doc.offset)
    }
}

impl From<Reward> for RewardDoc {
    fn from(r: Reward) -> Self {
        let v = |x: &DVector<f64>| x.iter().copied().collect::<Vec<_>>();
        let kind = match &r.kind {
            RewardKind::Linear { a } => KindDoc::Linear { a: v(a) },
            RewardKind::LearnedLinear { a_hat } => KindDoc::LearnedLinear { a_hat: v(a_hat) },
            RewardKind::Quadratic { a, b } => KindDoc::Quadratic {
                a: a.row_iter().map(|row| row.iter().copied().collect()).collect(),
                b: v(b),
            },
            RewardKind::RbfBump {
                center,
                width,
                height,
            } => KindDoc::RbfBump {
                center: v(center),
                width: *width,
                height: *height,
            },
        };
        RewardDoc {
            kind,
            beta: r.beta,
            offset: r.offset,
        }
    }
}

impl Reward {
    pub fn new(kind: RewardKind, beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::Input(format!("beta must be finite and > 0 (got {beta})")));
        }
        let finite = |v: &DVector<f64>| v.iter().all(|x| x.is_finite());
        match &kind {
            RewardKind::Linear { a } | RewardKind::LearnedLinear { a_hat: a } => {
                if a.is_empty() || !finite(a) {
                    return Err(Error::Input("linear reward needs a finite non-empty a".into()));
                }
            }
            RewardKind::Quadratic { a, b } => {
                if b.is_empty() || !finite(b) || a.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Input("quadratic reward needs finite A, b".into()));
                }
                let tol = 1e-12 * a.amax().max(1.0);
                if (a - a.transpose()).amax() > tol {
                    return Err(Error::Input("quadratic reward: A must be symmetric".into()));
                }
            }
            RewardKind::RbfBump {
                center,
                width,
                height,
            } => {
                if center.is_empty() || !finite(center) || !height.is_finite() {
                    return Err(Error::Input("rbf bump needs finite center and height".into()));
                }
                if !(*width > 0.0) || !width.is_finite() {
                    return Err(Error::Input(format!("rbf width must be > 0 (got {width})")));
                }
            }
        }
        Ok(Self {
            kind,
            beta,
            offset: 0.0,
        })
    }

    pub fn linear(a: DVector<f64>, beta: f64) -> Result<Self> {
        Self::new(RewardKind::Linear { a }, beta)
    }

    pub fn quadratic(a: DMatrix<f64>, b: DVector<f64>, beta: f64) -> Result<Self> {
        Self::new(RewardKind::Quadratic { a, b }, beta)
    }

    pub fn rbf_bump(center: DVector<f64>, width: f64, height: f64, beta: f64) -> Result<Self> {
        Self::new(
            RewardKind::RbfBump {
                center,
                width,
                height,
            },
            beta,
        )
    }

    /// `r ≡ c` in dimension `d`.
    pub fn constant(d: usize, c: f64, beta: f64) -> Result<Self> {
        Self::linear(DVector::zeros(d), beta)?.with_offset(c)
    }

    pub fn with_offset(mut self, offset: f64) -> Result<Self> {
        if !offset.is_finite() {
            return Err(Error::Input("reward offset must be finite".into()));
        }
        self.offset = offset;
        Ok(self)
    }

    pub fn with_beta(mut self, beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::Input(format!("beta must be finite and > 0 (got {beta})")));
        }
        self.beta = beta;
        Ok(self)
    }

    pub fn kind(&self) -> &RewardKind {
        &self.kind
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            RewardKind::Linear { a } | RewardKind::LearnedLinear { a_hat: a } => a.len(),
            RewardKind::Quadratic { b, .. } => b.len(),
            RewardKind::RbfBump { center, .. } => center.len(),
        }
    }

    /// Linear coefficient for the linear families.
    pub fn linear_coeff(&self) -> Option<&DVector<f64>> {
        match &self.kind {
            RewardKind::Linear { a } | RewardKind::LearnedLinear { a_hat: a } => Some(a),
            _ => None,
        }
    }

    /// Closed-form tilting and MGF identities exist for this family.
    pub fn is_conjugate(&self) -> bool {
        !matches!(self.kind, RewardKind::RbfBump { .. })
    }

    pub fn is_constant(&self) -> bool {
        match &self.kind {
            RewardKind::Linear { a } | RewardKind::LearnedLinear { a_hat: a } => a.iter().all(|v| *v == 0.0),
            RewardKind::Quadratic { a, b } => a.iter().chain(b.iter()).all(|v| *v == 0.0),
            RewardKind::RbfBump { height, .. } => *height == 0.0,
        }
    }

    pub fn eval(&self, x: &DVector<f64>, _y: Prompt) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self.value(x))
    }

    pub fn grad(&self, x: &DVector<f64>, _y: Prompt) -> Result<DVector<f64>> {
        check_dim(self.dim(), x.len())?;
        Ok(self.gradient(x))
    }

    /// Unchecked evaluation; callers guarantee the dimension.
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.offset
            + match &self.kind {
                RewardKind::Linear { a } | RewardKind::LearnedLinear { a_hat: a } => a.dot(x),
                RewardKind::Quadratic { a, b } => -0.5 * x.dot(&(a * x)) + b.dot(x),
                RewardKind::RbfBump {
                    center,
                    width,
                    height,
                } => height * (-(x - center).norm_squared() / (2.0 * width * width)).exp(),
            }
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            RewardKind::Linear { a } | RewardKind::LearnedLinear { a_hat: a } => a.clone(),
            RewardKind::Quadratic { a, b } => b - a * x,
            RewardKind::RbfBump {
                center,
                width,
                height,
            } => {
                let diff = x - center;
                let w2 = width * width;
                let k = -height * (-diff.norm_squared() / (2.0 * w2)).exp() / w2;
                diff * k
            }
        }
    }

    /// `sup_x r(x)` when finite.
    pub fn supremum(&self) -> Option<f64> {
        if self.is_constant() {
            return Some(self.offset);
        }
        match &self.kind {
            RewardKind::RbfBump { height, .. } => Some(self.offset + height.max(0.0)),
            RewardKind::Quadratic { a, b } => {
                let chol = a.clone().cholesky()?;
                Some(self.offset + 0.5 * b.dot(&chol.solve(b)))
            }
            _ => None,
        }
    }

    /// Canonical JSON descriptor, used in network headers.
    pub fn descriptor(&self) -> String {
        serde_json::to_string(self).expect("reward serializes")
    }
}
