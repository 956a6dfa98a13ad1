//! Closed-form Gaussian-mixture models and their noised/posterior views.

mod flow;
mod mixture;
mod posterior;
mod schedule;

pub use flow::{fm_marginal_velocity, fm_posterior, FlowPath, FLOW_T_CLAMP};
pub use mixture::{
    diffuse_between, diffuse_marginal, Gaussian, GaussianMixture, MixtureDoc, Prompt,
    PromptRegistry, RegistryDoc,
};
pub use posterior::{
    diffusion_posterior, posterior_x0_given_xt, ObservationPosterior, PosteriorComponent,
    PosteriorState,
};
pub use schedule::NoiseSchedule;
