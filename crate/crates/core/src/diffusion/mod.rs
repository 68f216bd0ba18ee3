//! Conditional DDPM over latent flow/occlusion sequences: schedule,
//! forward process, x0-prediction denoiser, fixed-variance posterior
//! sampler, and the stage-2 objective.

pub mod denoiser;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use denoiser::{sinusoidal_embedding, Denoiser, DenoiserConfig};
pub use sampler::{sample_sequence, sample_with, split_states, CondArrays, FlowFieldSeq};
pub use schedule::{make_schedule, posterior_mean, q_sample, NoiseSchedule};
pub use train::{
    build_clip_cache, ddpm_loss, eval_stage2, flow_occ_to_state, train_stage2, ClipCache,
    DmLossMode, Stage2Config, Stage2Log,
};
