use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::NoiseSchedule;
use crate::error::{check_dim, Error, Result};
use crate::numeric::log_sum_exp;

const SYMMETRY_TOL: f64 = 1e-12;
const WEIGHT_SUM_TOL: f64 = 1e-12;

/// A single multivariate normal with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Dimension {
                expected: d,
                got: cov.nrows(),
            });
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite mean or covariance".into()));
        }
        let scale = cov.amax().max(1.0);
        for i in 0..d {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::Input(format!(
                        "covariance not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::Input("covariance is not positive definite".into()))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            mean,
            cov,
            chol,
            log_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn chol(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Lower Cholesky factor `L` with `LLᵀ = Σ`.
    pub fn chol_l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn precision_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .expect("cholesky factor has a positive diagonal");
        -0.5 * (self.dim() as f64 * (2.0 * PI).ln() + self.log_det + z.norm_squared())
    }

    /// `∇ log N(x; μ, Σ) = -Σ⁻¹(x - μ)`.
    pub fn score(&self, x: &DVector<f64>) -> DVector<f64> {
        -self.chol.solve(&(x - &self.mean))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let eps = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + self.chol.l_dirty().lower_triangle() * eps
    }
}

/// Finite mixture of Gaussians sharing one dimension. Weights are stored in
/// log-space as well so tilted mixtures with extreme weights stay exact.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    log_weights: Vec<f64>,
    weights: Vec<f64>,
    components: Vec<Gaussian>,
    dim: usize,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != covs.len() {
            return Err(Error::Input(format!(
                "mixture needs matching non-empty weights/means/covs ({}, {}, {})",
                weights.len(),
                means.len(),
                covs.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Input("mixture weights must be finite and ≥ 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Input(format!("mixture weights sum to {total}, not 1")));
        }
        let components = means
            .into_iter()
            .zip(covs)
            .map(|(m, c)| Gaussian::new(m, c))
            .collect::<Result<Vec<_>>>()?;
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Self::assemble(log_weights, weights, components)
    }

    /// Build from unnormalized log-weights; normalization happens in log-space.
    pub fn from_log_weights(log_weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        if log_weights.is_empty() || log_weights.len() != components.len() {
            return Err(Error::Input("log-weights and components differ in length".into()));
        }
        let lse = log_sum_exp(&log_weights);
        if !lse.is_finite() {
            return Err(Error::Numeric(format!("log normalizer is {lse}")));
        }
        let log_weights: Vec<f64> = log_weights.iter().map(|l| l - lse).collect();
        let weights = log_weights.iter().map(|l| l.exp()).collect();
        Self::assemble(log_weights, weights, components)
    }

    pub fn single(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![cov])
    }

    /// Isotropic 1D convenience constructor: `(weight, mean, variance)` triples.
    pub fn from_1d(parts: &[(f64, f64, f64)]) -> Result<Self> {
        Self::new(
            parts.iter().map(|p| p.0).collect(),
            parts.iter().map(|p| DVector::from_element(1, p.1)).collect(),
            parts.iter().map(|p| DMatrix::from_element(1, 1, p.2)).collect(),
        )
    }

    fn assemble(log_weights: Vec<f64>, weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        let dim = components[0].dim();
        for c in &components {
            check_dim(dim, c.dim())?;
        }
        Ok(Self {
            log_weights,
            weights,
            components,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    fn component_log_terms(&self, x: &DVector<f64>) -> Vec<f64> {
        self.components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| lw + c.log_density(x))
            .collect()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        Ok(log_sum_exp(&self.component_log_terms(x)))
    }

    /// Posterior component probabilities at `x`.
    pub fn responsibilities(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        let terms = self.component_log_terms(x);
        let lse = log_sum_exp(&terms);
        Ok(terms.iter().map(|t| (t - lse).exp()).collect())
    }

    pub fn score(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let resp = self.responsibilities(x)?;
        let mut s = DVector::zeros(self.dim);
        for (c, r) in self.components.iter().zip(resp) {
            if r > 0.0 {
                s += c.score(x) * r;
            }
        }
        Ok(s)
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim);
        for (c, w) in self.components.iter().zip(&self.weights) {
            m += c.mean() * *w;
        }
        m
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.mean();
        let mut cov = DMatrix::zeros(self.dim, self.dim);
        for (c, w) in self.components.iter().zip(&self.weights) {
            let dm = c.mean() - &m;
            cov += (c.cov() + &dm * dm.transpose()) * *w;
        }
        cov
    }

    pub fn sample_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.weights
            .iter()
            .rposition(|w| *w > 0.0)
            .unwrap_or(self.weights.len() - 1)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let i = self.sample_component(rng);
        self.components[i].sample(rng)
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<DVector<f64>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    /// Apply `x ↦ scale·x + N(0, noise_var·I)` to every component.
    pub fn affine_noise(&self, scale: f64, noise_var: f64) -> Result<Self> {
        let eye = DMatrix::<f64>::identity(self.dim, self.dim);
        let comps = self
            .components
            .iter()
            .map(|c| Gaussian::new(c.mean() * scale, c.cov() * (scale * scale) + &eye * noise_var))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            log_weights: self.log_weights.clone(),
            weights: self.weights.clone(),
            components: comps,
            dim: self.dim,
        })
    }

    pub fn to_doc(&self) -> MixtureDoc {
        MixtureDoc {
            weights: self.weights.clone(),
            means: self.components.iter().map(|c| c.mean().iter().copied().collect()).collect(),
            covs: self
                .components
                .iter()
                .map(|c| {
                    (0..self.dim)
                        .map(|i| (0..self.dim).map(|j| c.cov()[(i, j)]).collect())
                        .collect()
                })
                .collect(),
        }
    }

    pub fn from_doc(doc: &MixtureDoc) -> Result<Self> {
        let means = doc
            .means
            .iter()
            .map(|m| DVector::from_vec(m.clone()))
            .collect::<Vec<_>>();
        let mut covs = Vec::with_capacity(doc.covs.len());
        for c in &doc.covs {
            let d = c.len();
            if c.iter().any(|row| row.len() != d) {
                return Err(Error::Input("covariance rows must be square".into()));
            }
            covs.push(DMatrix::from_fn(d, d, |i, j| c[i][j]));
        }
        Self::new(doc.weights.clone(), means, covs)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Self::from_doc(&serde_json::from_str(s)?)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(&self.to_doc()).expect("mixture document serializes")
    }
}

/// JSON form of a mixture: `{ "weights": [...], "means": [[...]], "covs": [[[...]]] }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureDoc {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covs: Vec<Vec<Vec<f64>>>,
}

/// Marginal `p_t` of the forward VP process started from `gm`.
pub fn diffuse_marginal(gm: &GaussianMixture, sched: &NoiseSchedule, t: f64) -> Result<GaussianMixture> {
    sched.check_time(t)?;
    if t == 0.0 {
        return Ok(gm.clone());
    }
    gm.affine_noise(sched.alpha(t), sched.sigma2(t))
}

/// Propagate a time-`s` marginal forward to time `t ≥ s`.
pub fn diffuse_between(
    marginal_s: &GaussianMixture,
    sched: &NoiseSchedule,
    s: f64,
    t: f64,
) -> Result<GaussianMixture> {
    sched.check_time(s)?;
    sched.check_time(t)?;
    if t < s {
        return Err(Error::Domain(format!("cannot diffuse backwards from {s} to {t}")));
    }
    let ratio = (sched.log_alpha(t) - sched.log_alpha(s)).exp();
    let var = sched.sigma2(t) - ratio * ratio * sched.sigma2(s);
    marginal_s.affine_noise(ratio, var.max(0.0))
}

/// Index into the prompt registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Prompt(pub usize);

/// Prompt id → reference mixture `p(x₀|y)`.
#[derive(Debug, Clone)]
pub struct PromptRegistry {
    mixtures: Vec<GaussianMixture>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryDoc {
    pub mixtures: Vec<MixtureDoc>,
}

impl PromptRegistry {
    pub fn new(mixtures: Vec<GaussianMixture>) -> Result<Self> {
        if mixtures.is_empty() {
            return Err(Error::Input("registry needs at least one mixture".into()));
        }
        let d = mixtures[0].dim();
        for m in &mixtures {
            check_dim(d, m.dim())?;
        }
        Ok(Self { mixtures })
    }

    pub fn len(&self) -> usize {
        self.mixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixtures.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.mixtures[0].dim()
    }

    pub fn get(&self, prompt: Prompt) -> Result<&GaussianMixture> {
        self.mixtures.get(prompt.0).ok_or_else(|| {
            Error::Input(format!(
                "prompt {} not registered ({} mixtures)",
                prompt.0,
                self.mixtures.len()
            ))
        })
    }

    pub fn to_doc(&self) -> RegistryDoc {
        RegistryDoc {
            mixtures: self.mixtures.iter().map(|m| m.to_doc()).collect(),
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: RegistryDoc = serde_json::from_str(s)?;
        Self::new(doc.mixtures.iter().map(GaussianMixture::from_doc).collect::<Result<_>>()?)
    }

    /// SHA-256 of the canonical JSON form; networks record it in their header.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(&self.to_doc()).expect("registry serializes");
        hex::encode(Sha256::digest(canon.as_bytes()))
    }
}
