use nalgebra::{DMatrix, DVector};

use crate::analytic::{ObservationPosterior, PosteriorState};
use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;
use crate::quadrature::{GaussianNodes, MAX_QUADRATURE_DIM};
use crate::rewards::{Reward, RewardKind};

const QUAD_NODES_1D: usize = 201;
const QUAD_NODES_2D: usize = 61;
const QUAD_RADIUS: f64 = 8.0;

#[derive(Debug, Clone)]
enum Pieces {
    Constant,
    /// `c = a/β`; per component `C_i c` and `½cᵀC_i c`.
    Linear {
        c: DVector<f64>,
        cc: Vec<(DVector<f64>, f64)>,
    },
    /// Per component: `C⁻¹`, `C' = (C⁻¹ + A/β)⁻¹`, `½(log|C'| - log|C|)`.
    Quadratic {
        bl: DVector<f64>,
        comps: Vec<(DMatrix<f64>, DMatrix<f64>, f64)>,
    },
    Quadrature {
        nodes: usize,
        precs: Vec<DMatrix<f64>>,
    },
}

/// Reward tilt of an observation posterior:
/// `q(x | y) ∝ p(x | y)·exp(r(x)/β)`, evaluated per observation `y`.
#[derive(Debug, Clone)]
pub struct PosteriorTilt {
    reward: Reward,
    pieces: Pieces,
}

/// Tilt quantities at one observation.
#[derive(Debug, Clone)]
pub struct TiltState {
    /// `log E_{p(x|y)}[exp(r/β)]`.
    pub log_g: f64,
    /// Tilted component responsibilities.
    pub rho: Vec<f64>,
    /// Tilted component means.
    pub means: Vec<DVector<f64>>,
    /// `∇_m log E_{N(m_i, C_i)}[exp(r/β)]`.
    pub dlog_e: Vec<DVector<f64>>,
}

impl TiltState {
    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.means[0].len());
        for (r, mi) in self.rho.iter().zip(&self.means) {
            m += mi * *r;
        }
        m
    }
}

impl PosteriorTilt {
    pub fn new(post: &ObservationPosterior, reward: &Reward) -> Result<Self> {
        crate::error::check_dim(post.dim(), reward.dim())?;
        let beta = reward.beta();
        let pieces = if reward.is_constant() {
            Pieces::Constant
        } else {
            match reward.kind() {
                RewardKind::Linear { a } | RewardKind::LearnedLinear { a_hat: a } => {
                    let c = a / beta;
                    let cc = post
                        .components()
                        .iter()
                        .map(|comp| {
                            let v = comp.covariance() * &c;
                            let q = 0.5 * c.dot(&v);
                            (v, q)
                        })
                        .collect();
                    Pieces::Linear { c, cc }
                }
                RewardKind::Quadratic { a, b } => {
                    let bq = a / beta;
                    let mut comps = Vec::with_capacity(post.components().len());
                    for (i, comp) in post.components().iter().enumerate() {
                        let prec = comp.cov.chol().inverse();
                        let p_new = &prec + &bq;
                        let p_new = (&p_new + p_new.transpose()) * 0.5;
                        let chol = p_new.cholesky().ok_or_else(|| {
                            Error::Domain(format!(
                                "quadratic tilt: C⁻¹ + A/β not positive definite for component {i}"
                            ))
                        })?;
                        let log_det_new = -2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                        let cov_new = chol.inverse();
                        let cov_new = (&cov_new + cov_new.transpose()) * 0.5;
                        comps.push((prec, cov_new, 0.5 * (log_det_new - comp.cov.log_det())));
                    }
                    Pieces::Quadratic { bl: b / beta, comps }
                }
                RewardKind::RbfBump { .. } => {
                    let d = post.dim();
                    if d > MAX_QUADRATURE_DIM {
                        return Err(Error::Unsupported(format!(
                            "non-conjugate reward needs quadrature, only available for d ≤ {MAX_QUADRATURE_DIM}"
                        )));
                    }
                    Pieces::Quadrature {
                        nodes: if d == 1 { QUAD_NODES_1D } else { QUAD_NODES_2D },
                        precs: post.components().iter().map(|c| c.cov.chol().inverse()).collect(),
                    }
                }
            }
        };
        Ok(Self {
            reward: reward.clone(),
            pieces,
        })
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.pieces, Pieces::Constant)
    }

    pub fn evaluate(&self, post: &ObservationPosterior, st: &PosteriorState) -> Result<TiltState> {
        let n = st.means.len();
        let shift = self.reward.offset() / self.reward.beta();
        let mut log_e = Vec::with_capacity(n);
        let mut means = Vec::with_capacity(n);
        let mut dlog_e = Vec::with_capacity(n);
        match &self.pieces {
            Pieces::Constant => {
                return Ok(TiltState {
                    log_g: shift,
                    rho: st.resp.clone(),
                    means: st.means.clone(),
                    dlog_e: vec![DVector::zeros(post.dim()); n],
                });
            }
            Pieces::Linear { c, cc } => {
                for (m, (cv, q)) in st.means.iter().zip(cc) {
                    log_e.push(c.dot(m) + q + shift);
                    means.push(m + cv);
                    dlog_e.push(c.clone());
                }
            }
            Pieces::Quadratic { bl, comps } => {
                for (m, (prec, cov_new, half_ld)) in st.means.iter().zip(comps) {
                    let pm = prec * m;
                    let eta = &pm + bl;
                    let m_new = cov_new * &eta;
                    log_e.push(half_ld + 0.5 * eta.dot(&m_new) - 0.5 * m.dot(&pm) + shift);
                    dlog_e.push(prec * (&m_new - m));
                    means.push(m_new);
                }
            }
            Pieces::Quadrature { nodes, precs } => {
                let beta = self.reward.beta();
                for ((m, comp), prec) in st.means.iter().zip(post.components()).zip(precs) {
                    let gn = GaussianNodes::new(m, &comp.cov.chol_l(), *nodes, QUAD_RADIUS)?;
                    let (lse, m_new) = gn.tilted_moments(|x| self.reward.value(x) / beta);
                    log_e.push(lse);
                    dlog_e.push(prec * (&m_new - m));
                    means.push(m_new);
                }
            }
        }
        let terms: Vec<f64> = st.log_resp.iter().zip(&log_e).map(|(a, b)| a + b).collect();
        let log_g = log_sum_exp(&terms);
        if !log_g.is_finite() {
            return Err(Error::Numeric(format!("log E[exp(r/β) | x_t] is {log_g}")));
        }
        let rho = terms.iter().map(|t| (t - log_g).exp()).collect();
        Ok(TiltState {
            log_g,
            rho,
            means,
            dlog_e,
        })
    }

    /// `∇_y log E_{p(x|y)}[exp(r/β)] = Σρ_i (s_i - s̄ + K_iᵀ∇_m log E_i)`.
    pub fn log_g_gradient(&self, post: &ObservationPosterior, st: &PosteriorState, ts: &TiltState) -> DVector<f64> {
        let mut g = DVector::zeros(post.dim());
        if self.is_constant() {
            return g;
        }
        for (i, comp) in post.components().iter().enumerate() {
            let r = ts.rho[i];
            if r == 0.0 {
                continue;
            }
            g += (&st.comp_scores[i] - &st.score + comp.gain.tr_mul(&ts.dlog_e[i])) * r;
        }
        g
    }
}
