use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::GuidanceProblem;
use crate::analytic::{NoiseSchedule, Prompt};
use crate::error::{check_dim, Error, Result};
use crate::neural::{audit_grad_input, AuditReport, Mlp, MlpDoc};
use crate::rewards::Reward;

pub const NETWORK_FORMAT: &str = "tiltlab-network/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    /// `t ~ U(t_min, T]`; sin/cos time features in the input.
    Uniform,
    /// `t = T` only; no time features.
    OneStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    /// Positive scalar `h(x_t, y, t)`; guidance is `∇_x log h`.
    Guidance,
    /// Vector field regressed directly onto the guidance.
    GradField,
}

/// Input layout: `[x_t (d), one-hot prompt (n_prompts), sin(πt/T), cos(πt/T)]`,
/// time features dropped in one-step mode.
pub fn encode_input(x: &DVector<f64>, prompt: Prompt, n_prompts: usize, t: f64, horizon: f64, mode: TimeMode) -> Vec<f64> {
    let mut v = Vec::with_capacity(x.len() + n_prompts + 2);
    v.extend(x.iter());
    v.extend((0..n_prompts).map(|k| if k == prompt.0 { 1.0 } else { 0.0 }));
    if mode == TimeMode::Uniform {
        let a = PI * t / horizon;
        v.push(a.sin());
        v.push(a.cos());
    }
    v
}

pub fn input_width(dim: usize, n_prompts: usize, mode: TimeMode) -> usize {
    dim + n_prompts + if mode == TimeMode::Uniform { 2 } else { 0 }
}

/// Provenance recorded with a persisted network. A network is only applied to
/// a problem whose registry, reward and schedule match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkHeader {
    pub format: String,
    pub kind: NetworkKind,
    pub registry_hash: String,
    pub n_prompts: usize,
    pub dim: usize,
    pub reward: Reward,
    pub beta: f64,
    pub schedule: NoiseSchedule,
    pub time_mode: TimeMode,
    /// Multiplier applied to the raw output of a gradient-field network.
    #[serde(default = "one")]
    pub output_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// The experiment that produced a persisted network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl NetworkHeader {
    pub fn for_problem(problem: &GuidanceProblem, kind: NetworkKind, time_mode: TimeMode) -> Self {
        Self {
            format: NETWORK_FORMAT.into(),
            kind,
            registry_hash: problem.registry.hash(),
            n_prompts: problem.registry.len(),
            dim: problem.registry.dim(),
            reward: problem.reward.clone(),
            beta: problem.reward.beta(),
            schedule: problem.sched,
            time_mode,
            output_scale: 1.0,
            provenance: None,
        }
    }

    /// Refuse to pair a network with a model it was not trained for.
    pub fn validate_against(&self, problem: &GuidanceProblem) -> Result<()> {
        let mut problems = Vec::new();
        if self.format != NETWORK_FORMAT {
            problems.push(format!("format {:?} (expected {NETWORK_FORMAT:?})", self.format));
        }
        let hash = problem.registry.hash();
        if self.registry_hash != hash {
            problems.push(format!("registry hash {} ≠ model {}", self.registry_hash, hash));
        }
        if self.n_prompts != problem.registry.len() || self.dim != problem.registry.dim() {
            problems.push(format!(
                "shape (d={}, prompts={}) ≠ model (d={}, prompts={})",
                self.dim,
                self.n_prompts,
                problem.registry.dim(),
                problem.registry.len()
            ));
        }
        if self.reward != problem.reward {
            problems.push(format!(
                "reward {} ≠ model {}",
                self.reward.descriptor(),
                problem.reward.descriptor()
            ));
        }
        if self.beta != problem.reward.beta() {
            problems.push(format!("beta {} ≠ model {}", self.beta, problem.reward.beta()));
        }
        if self.schedule != problem.sched {
            problems.push("noise schedule differs".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(format!("network header mismatch: {}", problems.join("; "))))
        }
    }
}

#[derive(Debug, Clone)]
pub struct GuidanceNetwork {
    pub header: NetworkHeader,
    pub net: Mlp,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    header: NetworkHeader,
    network: MlpDoc,
}

impl GuidanceNetwork {
    pub fn new(header: NetworkHeader, net: Mlp) -> Result<Self> {
        let want_in = input_width(header.dim, header.n_prompts, header.time_mode);
        if net.input_dim() != want_in {
            return Err(Error::Validation(format!(
                "network input width {} does not match header ({want_in})",
                net.input_dim()
            )));
        }
        let want_out = match header.kind {
            NetworkKind::Guidance => 1,
            NetworkKind::GradField => header.dim,
        };
        if net.output_dim() != want_out {
            return Err(Error::Validation(format!(
                "network output width {} does not match header ({want_out})",
                net.output_dim()
            )));
        }
        Ok(Self { header, net })
    }

    pub fn encode(&self, x: &DVector<f64>, prompt: Prompt, t: f64) -> Vec<f64> {
        encode_input(
            x,
            prompt,
            self.header.n_prompts,
            t,
            self.header.schedule.horizon,
            self.header.time_mode,
        )
    }

    fn check_call(&self, x: &DVector<f64>, prompt: Prompt, t: f64) -> Result<()> {
        check_dim(self.header.dim, x.len())?;
        if prompt.0 >= self.header.n_prompts {
            return Err(Error::Input(format!("prompt {} outside the network's registry", prompt.0)));
        }
        if self.header.time_mode == TimeMode::OneStep && (t - self.header.schedule.horizon).abs() > 1e-12 {
            return Err(Error::Usage(format!(
                "one-step network evaluated at t={t}; it is only valid at t=T={}",
                self.header.schedule.horizon
            )));
        }
        Ok(())
    }

    /// `h(x_t, y, t)` for a guidance network.
    pub fn h(&self, x: &DVector<f64>, prompt: Prompt, t: f64) -> Result<f64> {
        self.check_call(x, prompt, t)?;
        Ok(self.net.forward(&self.encode(x, prompt, t))?[0])
    }

    /// Guidance vector: `∇_x log h` or the scaled field output.
    pub fn guidance(&self, x: &DVector<f64>, prompt: Prompt, t: f64) -> Result<DVector<f64>> {
        self.check_call(x, prompt, t)?;
        let input = self.encode(x, prompt, t);
        let d = self.header.dim;
        match self.header.kind {
            NetworkKind::Guidance => {
                let g = self.net.grad_input(&input)?;
                Ok(DVector::from_column_slice(&g[..d]))
            }
            NetworkKind::GradField => {
                let out = self.net.forward(&input)?;
                Ok(DVector::from_iterator(d, out.into_iter().map(|v| v * self.header.output_scale)))
            }
        }
    }

    /// Finite-difference audit of `∇ log h` at the given points.
    pub fn audit(&self, points: &[(DVector<f64>, Prompt, f64)]) -> Result<AuditReport> {
        let mut rep = AuditReport {
            checked: 0,
            max_rel_err: 0.0,
        };
        if self.header.kind != NetworkKind::Guidance {
            return Ok(rep);
        }
        for (x, y, t) in points {
            let r = audit_grad_input(&self.net, &self.encode(x, *y, *t), 1e-5)?;
            rep.checked += r.checked;
            rep.max_rel_err = rep.max_rel_err.max(r.max_rel_err);
        }
        Ok(rep)
    }

    pub fn to_json_string(&self) -> String {
        let file = NetworkFile {
            header: self.header.clone(),
            network: self.net.to_doc(),
        };
        serde_json::to_string_pretty(&file).expect("network serializes")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: NetworkFile = serde_json::from_str(s)?;
        Self::new(file.header, Mlp::from_doc(&file.network)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    /// Load and check the header against `problem` before anything else.
    pub fn load(path: &Path, problem: &GuidanceProblem) -> Result<Self> {
        let net = Self::from_json_str(&std::fs::read_to_string(path)?)?;
        net.header.validate_against(problem)?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::GaussianMixture;
    use crate::neural::Head;
    use crate::numeric::rng_from_seed;

    fn problem(beta: f64) -> GuidanceProblem {
        let gm = GaussianMixture::from_1d(&[(0.5, -1.0, 0.5), (0.5, 2.0, 0.3)]).unwrap();
        let r = Reward::linear(DVector::from_element(1, 1.0), beta).unwrap();
        GuidanceProblem::single(gm, NoiseSchedule::default(), r).unwrap()
    }

    fn random_net(p: &GuidanceProblem, mode: TimeMode) -> GuidanceNetwork {
        let header = NetworkHeader::for_problem(p, NetworkKind::Guidance, mode);
        let mlp = Mlp::xavier(&[input_width(1, 1, mode), 8, 1], Head::Exp, &mut rng_from_seed(2)).unwrap();
        GuidanceNetwork::new(header, mlp).unwrap()
    }

    #[test]
    fn encoding_layout() {
        let x = DVector::from_vec(vec![0.5, -1.0]);
        let v = encode_input(&x, Prompt(1), 3, 0.5, 1.0, TimeMode::Uniform);
        assert_eq!(v.len(), input_width(2, 3, TimeMode::Uniform));
        assert_eq!(&v[..5], &[0.5, -1.0, 0.0, 1.0, 0.0]);
        assert!((v[5] - 1.0).abs() < 1e-15 && v[6].abs() < 1e-15);
        assert_eq!(encode_input(&x, Prompt(0), 3, 1.0, 1.0, TimeMode::OneStep).len(), 5);
    }

    #[test]
    fn persistence_round_trip_is_exact() {
        let p = problem(1.0);
        let net = random_net(&p, TimeMode::Uniform);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.json");
        net.save(&path).unwrap();
        let back = GuidanceNetwork::load(&path, &p).unwrap();
        assert_eq!(back.net.params(), net.net.params());
        for i in 0..20 {
            let x = DVector::from_element(1, -2.0 + 0.2 * i as f64);
            let t = 0.05 + 0.045 * i as f64;
            assert_eq!(back.h(&x, Prompt(0), t).unwrap(), net.h(&x, Prompt(0), t).unwrap());
        }
    }

    #[test]
    fn load_rejects_mismatched_problem() {
        let p = problem(1.0);
        let net = random_net(&p, TimeMode::Uniform);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.json");
        net.save(&path).unwrap();
        let err = GuidanceNetwork::load(&path, &problem(2.0)).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Validation(_)));
        assert!(msg.contains("beta") && msg.contains("reward"), "{msg}");

        let other = GuidanceProblem::single(
            GaussianMixture::from_1d(&[(1.0, 0.0, 1.0)]).unwrap(),
            NoiseSchedule::default(),
            p.reward.clone(),
        )
        .unwrap();
        assert!(GuidanceNetwork::load(&path, &other).unwrap_err().to_string().contains("registry hash"));
    }

    #[test]
    fn file_format_is_checked() {
        let p = problem(1.0);
        let net = random_net(&p, TimeMode::Uniform);
        let mut v: serde_json::Value = serde_json::from_str(&net.to_json_string()).unwrap();
        v["header"]["format"] = "tiltlab-network/0".into();
        let back = GuidanceNetwork::from_json_str(&v.to_string()).unwrap();
        assert!(back.header.validate_against(&p).is_err());
        v["header"]["surprise"] = 1.into();
        assert!(GuidanceNetwork::from_json_str(&v.to_string()).is_err());
    }

    #[test]
    fn one_step_network_only_at_horizon() {
        let p = problem(1.0);
        let net = random_net(&p, TimeMode::OneStep);
        let x = DVector::from_element(1, 0.3);
        assert!(net.h(&x, Prompt(0), 1.0).is_ok());
        assert!(matches!(net.guidance(&x, Prompt(0), 0.5), Err(Error::Usage(_))));
    }

    #[test]
    fn width_mismatch_rejected() {
        let p = problem(1.0);
        let header = NetworkHeader::for_problem(&p, NetworkKind::Guidance, TimeMode::Uniform);
        let mlp = Mlp::xavier(&[2, 4, 1], Head::Exp, &mut rng_from_seed(0)).unwrap();
        assert!(GuidanceNetwork::new(header, mlp).is_err());
    }

    #[test]
    fn guidance_gradient_passes_audit() {
        let p = problem(1.0);
        let net = random_net(&p, TimeMode::Uniform);
        let pts: Vec<_> = (0..10)
            .map(|i| (DVector::from_element(1, -1.5 + 0.3 * i as f64), Prompt(0), 0.1 + 0.08 * i as f64))
            .collect();
        let rep = net.audit(&pts).unwrap();
        assert!(rep.checked > 0 && rep.max_rel_err < 1e-4, "{rep:?}");
    }
}
