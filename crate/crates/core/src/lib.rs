//! Intention-driven ego-to-exo video generation, desk scale.
//!
//! Two-stage pipeline: a latent flow autoencoder learns to warp first
//! frames into later frames through estimated latent flow/occlusion;
//! a conditional DDPM then generates those flow sequences from a head
//! trajectory, an action description, and the first frames of both
//! views. A procedural world simulator supplies paired clips with
//! ground-truth trajectories and flow for training and evaluation.

pub mod cfpm;
pub mod conditioning;
pub mod diffusion;
pub mod lfae;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod worldsim;
pub mod tensor;

pub use tensor::{Array, ParamStore, Real, Rng, Tape, Var};
