//! JSON-configured experiments: build the model, obtain guidance (training
//! it if needed), sample, evaluate and write artifacts.
//!
//! Every artifact records the config hash and the seed. Sub-seeds for the
//! sampler, training, reference draws and the MMD permutations are derived
//! from the one top-level seed.

pub mod audit;
pub mod io;
pub mod svg;
pub mod sweep;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytic::{GaussianMixture, MixtureDoc, NoiseSchedule, Prompt, PromptRegistry};
use crate::error::{Error, Result};
use crate::flow_guidance::{FlowGuidanceKind, FlowGuidanceSource, FlowProblem, DEFAULT_FLOW_CLAMP};
use crate::guidance::{
    train_grad_field_net, train_guidance_network, GradFieldReport, Guidance, GuidanceNetwork, GuidanceProblem,
    GuidanceSource, M1Mode, NetworkKind, Provenance, TimeMode, TrainingConfig, TrainingReport,
};
use crate::metrics::{evaluate, EvalReport, MMD_MIN_SAMPLES};
use crate::numeric::{derive_seed, rng_from_seed};
use crate::rewards::{Reward, TiltedDistribution};
use crate::samplers::{sample_diffusion, sample_flow, SampleBatch, SamplerConfig, SamplerKind, DEFAULT_BATCH, DEFAULT_T_END};

pub const CONFIG_SCHEMA: &str = "tiltlab-experiment/1";

/// Environment variable that sets the worker thread count.
pub const THREADS_ENV: &str = "TILTLAB_THREADS";

const SEED_SAMPLER: u64 = 0;
const SEED_TRAINING: u64 = 1;
const SEED_REFERENCE: u64 = 2;
const SEED_MMD: u64 = 3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    Diffusion,
    Flow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub family: Family,
    /// Registry file, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry: Option<String>,
    /// Inline single-prompt model, instead of a registry file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<MixtureDoc>,
    #[serde(default = "prompt_zero")]
    pub prompt: Prompt,
}

fn prompt_zero() -> Prompt {
    Prompt(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    None,
    Exact,
    M1,
    M2,
    TrainedNet,
    GradFreeIs,
    GradFieldNet,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::None,
        Method::Exact,
        Method::M1,
        Method::M2,
        Method::TrainedNet,
        Method::GradFreeIs,
        Method::GradFieldNet,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Exact => "exact",
            Method::M1 => "m1",
            Method::M2 => "m2",
            Method::TrainedNet => "trained_net",
            Method::GradFreeIs => "grad_free_is",
            Method::GradFieldNet => "grad_field_net",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::Input(format!("unknown guidance method {s:?}")))
    }

    fn is_network(self) -> bool {
        matches!(self, Method::TrainedNet | Method::GradFieldNet)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSpec {
    pub method: Method,
    /// Guidance scale `α` multiplying the guidance term.
    #[serde(default = "one")]
    pub strength: f64,
    /// M1 sample count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<M1Mode>,
    /// Proposal count for the importance-sampling estimators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// Persisted network, relative to the config file. Trained in-process
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<String>,
    /// Flow time clamp `ε`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamp: Option<f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
}

fn default_batch() -> usize {
    DEFAULT_BATCH
}

fn default_t_end() -> f64 {
    DEFAULT_T_END
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSpec {
    /// Exact draws from the tilted target used as the MMD reference.
    #[serde(default = "default_reference")]
    pub reference_samples: usize,
    #[serde(default = "yes")]
    pub mmd: bool,
}

fn default_reference() -> usize {
    10_000
}

fn yes() -> bool {
    true
}

impl Default for MetricsSpec {
    fn default() -> Self {
        Self {
            reference_samples: default_reference(),
            mmd: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    #[serde(default)]
    pub name: String,
    pub model: ModelSpec,
    /// Diffusion only.
    #[serde(default)]
    pub schedule: NoiseSchedule,
    pub reward: Reward,
    pub guidance: GuidanceSpec,
    pub sampler: SamplerSpec,
    /// Used when a network method trains in-process. Its seed is replaced by
    /// one derived from the experiment seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingConfig>,
    #[serde(default)]
    pub metrics: MetricsSpec,
    #[serde(default)]
    pub seed: u64,
    /// Relative to the config file.
    #[serde(default = "default_output")]
    pub output_dir: String,
}

fn default_output() -> String {
    "out".into()
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Debug, Clone)]
pub enum Problem {
    Diffusion(GuidanceProblem),
    Flow(FlowProblem),
}

/// Guidance ready to hand to a sampler.
#[derive(Debug, Clone)]
pub enum ResolvedGuidance {
    Diffusion(Guidance),
    Flow(FlowGuidanceSource),
}

impl ResolvedGuidance {
    pub fn tag(&self) -> &'static str {
        match self {
            ResolvedGuidance::Diffusion(g) => g.source.tag(),
            ResolvedGuidance::Flow(g) => g.tag(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingArtifact {
    Guidance(TrainingReport),
    GradField(GradFieldReport),
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub network: GuidanceNetwork,
    pub report: TrainingArtifact,
}

/// An artifact body tagged with the config hash and seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    pub seed: u64,
    #[serde(flatten)]
    pub body: T,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub family: Family,
    pub method: Method,
    pub guidance: String,
    pub sampler: SamplerKind,
    pub steps: usize,
    pub eval: EvalReport,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub batch: SampleBatch,
    pub report: RunReport,
    pub trained: Option<Trained>,
}

/// A validated config with its model loaded.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
    pub problem: Problem,
    pub config_hash: String,
    /// Network loaded from disk, when the config names one.
    network: Option<Arc<GuidanceNetwork>>,
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = ExperimentConfig::from_json_str(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_config(cfg, &base)
    }

    /// Validate `cfg` and load everything it references. Nothing is trained
    /// or sampled here.
    pub fn from_config(cfg: ExperimentConfig, base_dir: &Path) -> Result<Self> {
        if cfg.schema != CONFIG_SCHEMA {
            return Err(Error::Validation(format!(
                "config schema {:?} not supported (expected {CONFIG_SCHEMA:?})",
                cfg.schema
            )));
        }
        let registry = match (&cfg.model.registry, &cfg.model.mixture) {
            (Some(p), None) => {
                let path = resolve(base_dir, p);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::Validation(format!("registry file {}: {e}", path.display())))?;
                PromptRegistry::from_json_str(&text)?
            }
            (None, Some(doc)) => PromptRegistry::new(vec![GaussianMixture::from_doc(doc)?])?,
            _ => return Err(Error::Validation("model needs exactly one of `registry` or `mixture`".into())),
        };
        registry.get(cfg.model.prompt)?;
        if cfg.reward.dim() != registry.dim() {
            return Err(Error::Validation(format!(
                "reward dimension {} does not match model dimension {}",
                cfg.reward.dim(),
                registry.dim()
            )));
        }
        let problem = match cfg.model.family {
            Family::Diffusion => {
                cfg.schedule.validate()?;
                Problem::Diffusion(GuidanceProblem::new(registry.clone(), cfg.schedule, cfg.reward.clone())?)
            }
            Family::Flow => Problem::Flow(FlowProblem::new(registry.clone(), cfg.reward.clone())?),
        };
        validate_compat(&cfg)?;
        let config_hash = {
            let mut h = Sha256::new();
            h.update(serde_json::to_string(&cfg).expect("config serializes").as_bytes());
            h.update(registry.hash().as_bytes());
            hex::encode(h.finalize())
        };
        let mut exp = Self {
            config: cfg,
            base_dir: base_dir.to_path_buf(),
            problem,
            config_hash,
            network: None,
        };
        exp.sampler_config().validate(exp.horizon())?;
        if let Some(p) = &exp.config.guidance.network {
            let Problem::Diffusion(gp) = &exp.problem else {
                unreachable!("checked in validate_compat")
            };
            let path = resolve(base_dir, p);
            if !path.exists() {
                return Err(Error::Validation(format!("network file {} not found", path.display())));
            }
            let net = GuidanceNetwork::load(&path, gp)?;
            exp.check_network(&net)?;
            exp.network = Some(Arc::new(net));
        }
        Ok(exp)
    }

    /// Network loaded from the config's `network` file.
    pub fn network(&self) -> Option<&GuidanceNetwork> {
        self.network.as_deref()
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn prompt(&self) -> Prompt {
        self.config.model.prompt
    }

    pub fn dim(&self) -> usize {
        match &self.problem {
            Problem::Diffusion(p) => p.dim(),
            Problem::Flow(p) => p.dim(),
        }
    }

    fn horizon(&self) -> f64 {
        match &self.problem {
            Problem::Diffusion(p) => p.sched.horizon,
            Problem::Flow(_) => 1.0,
        }
    }

    pub fn reward(&self) -> &Reward {
        &self.config.reward
    }

    pub fn output_dir(&self) -> PathBuf {
        resolve(&self.base_dir, &self.config.output_dir)
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.config_hash.clone(),
            seed: self.seed(),
        }
    }

    pub fn stamp<T>(&self, body: T) -> Stamped<T> {
        Stamped {
            config_hash: self.config_hash.clone(),
            seed: self.seed(),
            body,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        let s = &self.config.sampler;
        SamplerConfig {
            kind: s.kind,
            steps: s.steps,
            batch: s.batch,
            seed: derive_seed(self.seed(), SEED_SAMPLER),
            t_end: s.t_end,
        }
    }

    /// Training settings with the derived seed and the method's time mode.
    pub fn training_config(&self) -> TrainingConfig {
        let mut t = self.config.training.clone().unwrap_or_else(|| TrainingConfig {
            time_mode: if self.config.guidance.method == Method::GradFieldNet {
                TimeMode::OneStep
            } else {
                TimeMode::Uniform
            },
            ..TrainingConfig::default()
        });
        t.seed = derive_seed(self.seed(), SEED_TRAINING);
        t
    }

    pub fn target(&self) -> Result<TiltedDistribution> {
        match &self.problem {
            Problem::Diffusion(p) => p.tilted(self.prompt()),
            Problem::Flow(p) => p.tilted(self.prompt()),
        }
    }

    fn check_network(&self, net: &GuidanceNetwork) -> Result<()> {
        let want = match self.config.guidance.method {
            Method::GradFieldNet => NetworkKind::GradField,
            _ => NetworkKind::Guidance,
        };
        if net.header.kind != want {
            return Err(Error::Validation(format!(
                "network is a {:?} network but method {} needs {want:?}",
                net.header.kind,
                self.config.guidance.method.tag()
            )));
        }
        if net.header.time_mode == TimeMode::OneStep && self.config.sampler.kind != SamplerKind::OneStep {
            return Err(Error::Validation(
                "one-step network can only drive the one_step sampler".into(),
            ));
        }
        Ok(())
    }

    /// Train the configured network method on every registered prompt.
    pub fn train(&self) -> Result<Trained> {
        let Problem::Diffusion(p) = &self.problem else {
            return Err(Error::Usage("training applies to diffusion network methods".into()));
        };
        let prompts: Vec<Prompt> = (0..p.registry.len()).map(Prompt).collect();
        let cfg = self.training_config();
        let (mut network, report) = match self.config.guidance.method {
            Method::TrainedNet => {
                let (n, r) = train_guidance_network(p, &prompts, &cfg)?;
                (n, TrainingArtifact::Guidance(r))
            }
            Method::GradFieldNet => {
                let (n, r) = train_grad_field_net(p, &prompts, &cfg)?;
                (n, TrainingArtifact::GradField(r))
            }
            m => return Err(Error::Usage(format!("method {} has nothing to train", m.tag()))),
        };
        network.header.provenance = Some(self.provenance());
        self.check_network(&network)?;
        Ok(Trained { network, report })
    }

    /// Build the sampler-facing guidance, training a network in-process when
    /// the method needs one and the config does not name a file.
    pub fn resolve_guidance(&self) -> Result<(ResolvedGuidance, Option<Trained>)> {
        let g = &self.config.guidance;
        if let Problem::Flow(_) = self.problem {
            let kind = match g.method {
                Method::None => FlowGuidanceKind::None,
                Method::Exact => FlowGuidanceKind::Exact,
                Method::GradFreeIs => FlowGuidanceKind::TrainingFreeIs { k: g.k.unwrap_or(0) },
                m => unreachable!("{} rejected for flow in validate_compat", m.tag()),
            };
            let src = FlowGuidanceSource::new(kind, g.clamp.unwrap_or(DEFAULT_FLOW_CLAMP))?;
            return Ok((ResolvedGuidance::Flow(src), None));
        }
        let mut trained = None;
        let source = match g.method {
            Method::None => GuidanceSource::None,
            Method::Exact => GuidanceSource::Exact,
            Method::M1 => GuidanceSource::M1 {
                n: g.n.unwrap_or(0),
                mode: g.mode.unwrap_or_default(),
            },
            Method::M2 => GuidanceSource::M2,
            Method::GradFreeIs => GuidanceSource::GradFreeIs { k: g.k.unwrap_or(0) },
            Method::TrainedNet | Method::GradFieldNet => {
                let net = match &self.network {
                    Some(n) => n.clone(),
                    None => {
                        let t = self.train()?;
                        let n = Arc::new(t.network.clone());
                        trained = Some(t);
                        n
                    }
                };
                if g.method == Method::TrainedNet {
                    GuidanceSource::TrainedNet(net)
                } else {
                    GuidanceSource::GradFieldNet(net)
                }
            }
        };
        let guidance = if g.method == Method::None {
            Guidance::none()
        } else {
            Guidance::new(source, g.strength)?
        };
        Ok((ResolvedGuidance::Diffusion(guidance), trained))
    }

    pub fn sample_with(&self, g: &ResolvedGuidance) -> Result<SampleBatch> {
        let cfg = self.sampler_config();
        match (&self.problem, g) {
            (Problem::Diffusion(p), ResolvedGuidance::Diffusion(g)) => sample_diffusion(p, self.prompt(), g, &cfg),
            (Problem::Flow(p), ResolvedGuidance::Flow(g)) => sample_flow(p, self.prompt(), g, &cfg),
            _ => Err(Error::Usage("guidance family does not match the model family".into())),
        }
    }

    /// Exact draws from the tilted target.
    pub fn reference_samples(&self) -> Result<Vec<nalgebra::DVector<f64>>> {
        let mut rng = rng_from_seed(derive_seed(self.seed(), SEED_REFERENCE));
        self.target()?.sample_n(&mut rng, self.config.metrics.reference_samples)
    }

    /// Metrics for `samples` against the tilted target. `batch` supplies ESS
    /// summaries and sampler warnings when available.
    pub fn evaluate(&self, samples: &[nalgebra::DVector<f64>], batch: Option<&SampleBatch>) -> Result<EvalReport> {
        if samples.is_empty() {
            return Err(Error::Input("no samples to evaluate".into()));
        }
        for x in samples {
            crate::error::check_dim(self.dim(), x.len())?;
        }
        let target = self.target()?;
        let m = &self.config.metrics;
        let mut warnings = Vec::new();
        let reference = if m.mmd && samples.len() >= MMD_MIN_SAMPLES && m.reference_samples >= MMD_MIN_SAMPLES {
            Some(self.reference_samples()?)
        } else {
            if m.mmd {
                warnings.push(format!("MMD skipped: needs at least {MMD_MIN_SAMPLES} samples on each side"));
            }
            None
        };
        let mut rep = evaluate(
            samples,
            self.reward(),
            &target,
            reference.as_deref(),
            derive_seed(self.seed(), SEED_MMD),
        )?;
        if let Some(b) = batch {
            rep.ess = b.stats.ess;
            rep.warnings.extend(b.stats.warnings.iter().cloned());
        }
        rep.warnings.extend(warnings);
        Ok(rep)
    }

    /// Guidance, sampling and evaluation, in memory.
    pub fn execute(&self) -> Result<RunOutcome> {
        let (g, trained) = self.resolve_guidance()?;
        let batch = self.sample_with(&g)?;
        let eval = self.evaluate(&batch.samples, Some(&batch))?;
        let report = RunReport {
            name: self.config.name.clone(),
            family: self.config.model.family,
            method: self.config.guidance.method,
            guidance: g.tag().to_string(),
            sampler: batch.stats.sampler,
            steps: batch.stats.steps,
            eval,
        };
        Ok(RunOutcome { batch, report, trained })
    }

    /// `execute` plus every artifact under `out`.
    pub fn run(&self, out: &Path) -> Result<RunOutcome> {
        let outcome = self.execute()?;
        std::fs::create_dir_all(out)?;
        if let Some(t) = &outcome.trained {
            self.write_training(out, t)?;
        }
        self.write_samples(out, &outcome.batch)?;
        io::write_json(&out.join("report.json"), &self.stamp(&outcome.report))?;
        if self.dim() == 2 {
            self.write_scatter(out, &outcome.batch.samples)?;
        }
        Ok(outcome)
    }

    pub fn write_samples(&self, out: &Path, batch: &SampleBatch) -> Result<()> {
        std::fs::create_dir_all(out)?;
        io::write_samples_csv(&out.join("samples.csv"), &batch.samples, &self.provenance())?;
        io::write_json(&out.join("stats.json"), &self.stamp(&batch.stats))
    }

    pub fn write_training(&self, out: &Path, t: &Trained) -> Result<()> {
        std::fs::create_dir_all(out)?;
        t.network.save(&out.join("network.json"))?;
        io::write_json(&out.join("training_report.json"), &self.stamp(&t.report))
    }

    pub fn write_scatter(&self, out: &Path, samples: &[nalgebra::DVector<f64>]) -> Result<()> {
        let target = self.target()?;
        let doc = svg::scatter_over_density(samples, &target, &self.provenance())?;
        std::fs::write(out.join("scatter.svg"), doc)?;
        Ok(())
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Method, sampler and parameter compatibility, checked before any work.
fn validate_compat(cfg: &ExperimentConfig) -> Result<()> {
    let g = &cfg.guidance;
    let m = g.method;
    let bad = |msg: String| Err(Error::Validation(msg));
    match cfg.model.family {
        Family::Diffusion => {
            if cfg.sampler.kind == SamplerKind::FlowEuler {
                return bad("flow_euler sampler needs a flow model".into());
            }
            if g.clamp.is_some() {
                return bad("`clamp` applies to flow models only".into());
            }
        }
        Family::Flow => {
            if cfg.sampler.kind != SamplerKind::FlowEuler {
                return bad(format!("flow models use the flow_euler sampler, not {}", cfg.sampler.kind.tag()));
            }
            if !matches!(m, Method::None | Method::Exact | Method::GradFreeIs) {
                return bad(format!("method {} is not available for flow models", m.tag()));
            }
        }
    }
    if (g.n.is_some() || g.mode.is_some()) && m != Method::M1 {
        return bad("`n` and `mode` apply to m1 only".into());
    }
    if m == Method::M1 && g.n.is_none() {
        return bad("m1 needs `n`".into());
    }
    if g.k.is_some() != (m == Method::GradFreeIs) {
        return bad("grad_free_is needs `k`, and only it takes one".into());
    }
    if g.network.is_some() && !m.is_network() {
        return bad(format!("method {} does not take a network", m.tag()));
    }
    if cfg.training.is_some() && !m.is_network() {
        return bad(format!("method {} does not train", m.tag()));
    }
    if m == Method::GradFieldNet {
        if cfg.sampler.kind != SamplerKind::OneStep {
            return bad("grad_field_net requires the one_step sampler".into());
        }
        if let Some(t) = &cfg.training {
            if t.time_mode != TimeMode::OneStep {
                return bad("grad_field_net requires training.time_mode = one_step".into());
            }
        }
    }
    if m == Method::TrainedNet {
        if let Some(t) = &cfg.training {
            if t.time_mode == TimeMode::OneStep && cfg.sampler.kind != SamplerKind::OneStep {
                return bad("a one-step network can only drive the one_step sampler".into());
            }
        }
    }
    if !(g.strength >= 0.0 && g.strength.is_finite()) {
        return bad(format!("guidance strength must be ≥ 0 (got {})", g.strength));
    }
    if m == Method::None && g.strength != 1.0 {
        return bad("strength has no effect without guidance".into());
    }
    if let Some(t) = &cfg.training {
        t.validate(cfg.schedule.horizon)?;
    }
    Ok(())
}

/// Machine-readable error document: `{"error": {"kind": ..., "message": ...}}`.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } }).to_string()
}

/// Size the global rayon pool from `TILTLAB_THREADS`, when set.
pub fn init_threads() -> Result<Option<usize>> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Input(format!("{THREADS_ENV} must be a positive integer (got {v:?})")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(format!("thread pool already initialized: {e}")))?;
    Ok(Some(n))
}

#[cfg(test)]
mod tests;
