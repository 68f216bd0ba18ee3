//! Evaluation suite: perceptual distance through the stage-1 fixed
//! feature net, Fréchet video distance, and kernel video distance over
//! a fixed random spatiotemporal extractor.

pub mod evaluate;
pub mod features;
pub mod mmd;
pub mod stats;

pub use evaluate::{evaluate, report_csv, PerceptualMeter, Report};
pub use features::{VideoExtractor, EXTRACTOR_ID, EXTRACTOR_SEED, FEATURE_DIM};
pub use mmd::{kernel_distance, poly_kernel};
pub use stats::{frechet_distance, gaussian_stats, jacobi_eigh, GaussianStats};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] crate::worldsim::DataError),
    #[error("clip ids mismatch: missing in generated {missing_in_gen:?}, missing in reference {missing_in_ref:?}")]
    IdMismatch { missing_in_gen: Vec<String>, missing_in_ref: Vec<String> },
    #[error("need at least 2 clips, got {0}")]
    TooFewClips(usize),
    #[error("frame count mismatch: extractor expects {expected}, clip has {got}")]
    FrameCount { expected: usize, got: usize },
    #[error("feature dimensions differ: {a} vs {b}")]
    DimMismatch { a: usize, b: usize },
    #[error("non-finite statistics")]
    NonFinite,
}
