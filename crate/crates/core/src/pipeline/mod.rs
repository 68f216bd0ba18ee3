//! Orchestration, persistence, and configuration: the glue tying the
//! modules into the two-stage train / generate / evaluate workflow.

pub mod checkpoint;
pub mod config;
pub mod run;

pub use checkpoint::{load_checkpoint, save_checkpoint, CkptError};
pub use config::{ConfigError, RunConfig};
pub use run::{
    cmd_evaluate, cmd_gen_data, cmd_generate, cmd_gradcheck, cmd_train, flow_to_rgb,
    gradcheck_coverage, run_config_from_meta, vocab_len_from_meta, GenerateArgs, PipelineError,
};
