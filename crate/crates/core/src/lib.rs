//! Reward-tilted sampling on analytic generative models.
//!
//! Every model in this crate is a Gaussian mixture, so the data distribution,
//! its noised marginals, denoising posteriors and reward-tilted targets are all
//! available in closed form. That makes each guidance estimator checkable
//! against an exact answer:
//!
//! - [`analytic`]: mixtures, the VP noise schedule, posteriors and the
//!   flow-matching path.
//! - [`rewards`]: reward families, exponential tilting, preference data and
//!   Bradley–Terry fitting.
//! - [`neural`]: a small MLP with exact parameter, input and mixed gradients,
//!   plus Adam.
//! - [`guidance`]: diffusion-side guidance estimators and their training.
//! - [`flow_guidance`]: velocity guidance for flow matching.
//! - [`samplers`]: reverse SDE, probability-flow ODE, flow Euler and
//!   few/one-step Tweedie generation.
//! - [`metrics`]: MMD with a permutation null, reward summaries.
//! - [`harness`]: JSON-configured experiments, sweeps and audits.

pub mod analytic;
pub mod error;
pub mod flow_guidance;
pub mod guidance;
pub mod harness;
pub mod metrics;
pub mod neural;
pub mod numeric;
pub mod quadrature;
pub mod rewards;
pub mod samplers;

pub use analytic::{FlowPath, GaussianMixture, NoiseSchedule, Prompt, PromptRegistry};
pub use error::{Error, Result};
pub use rewards::{Reward, RewardKind, TiltedDistribution};
