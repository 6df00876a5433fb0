//! Variance-preserving diffusion: schedules, the forward process, training losses,
//! guidance and the reverse-time samplers.

mod process;
mod sampler;
mod schedule;

pub use process::{
    ancestral_step, ancestral_step_between, cfg_eps, ddpm_loss, euler_maruyama_step,
    forward_sample, forward_sample_batch, ncsn_score_loss, reconstruct_x0, score_from_eps,
    EpsModel,
};
pub use sampler::{chain_rng, sample, standard_normal, strided_timesteps, SampleOptions, Sampler};
pub use schedule::{
    make_schedule, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_SDE_BETA_MAX,
    DEFAULT_SDE_BETA_MIN, DEFAULT_STEPS, SDE_EPS,
};
