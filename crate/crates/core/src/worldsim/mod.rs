//! Procedural generator of paired ego/exo clips with ground-truth head
//! trajectories, backward flow, occlusion, and action descriptions.
//!
//! The world is a top-down room: static colored objects plus one agent
//! disc with a heading marker. The exocentric view is a fixed overhead
//! camera; the egocentric view is the forward half-plane window of the
//! agent, resampled from the exo rasterization.

pub mod action;
pub mod dataset;
pub mod flow;
pub mod ppm;
pub mod render;
pub mod scene;

pub use action::{script_action, ActionSpec, Verb};
pub use dataset::{generate_dataset, Clip, Dataset, ManifestEntry, Split, Vocab, WorldConfig};
pub use flow::{downsample_flow, gt_backward_flow, FlowFieldPx};
pub use render::{render_ego, render_exo, render_exo_plain};
pub use scene::{generate_scene, ObjectSpec, Pose, SceneState};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed file {path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("unknown vocabulary token id {0}")]
    UnknownTokenId(usize),
    #[error("unknown vocabulary token {0:?}")]
    UnknownToken(String),
    #[error("manifest does not match directory contents: {0}")]
    ManifestMismatch(String),
    #[error("clip generation failed after {0} retries")]
    GenerationRetries(usize),
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

/// Worker count for embarrassingly parallel stages; overridable through
/// IDE_THREADS. Outputs are identical for any value by construction
/// (one independent work item per clip).
pub fn worker_threads() -> usize {
    if let Ok(v) = std::env::var("IDE_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(4)
}

/// Run `f(i)` for i in 0..n on the configured worker count, returning
/// results in index order.
pub fn parallel_map<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    let workers = worker_threads().min(n.max(1));
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<&mut Option<R>>> =
        out.iter_mut().map(std::sync::Mutex::new).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                **slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    out.into_iter().map(|r| r.expect("worker filled every slot")).collect()
}
