//! `ide`: command-line front end for the ego-to-exo generation
//! pipeline. Exit codes: 0 ok, 2 config error, 3 missing prerequisite,
//! 4 data mismatch, 5 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ide_core::conditioning::FuseMode;
use ide_core::pipeline::{
    cmd_evaluate, cmd_gen_data, cmd_generate, cmd_gradcheck, cmd_train, gradcheck_coverage,
    GenerateArgs, PipelineError, RunConfig,
};

#[derive(Parser)]
#[command(name = "ide", about = "Intention-driven ego-to-exo video generation", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOverrides {
    /// Run configuration file (key=value lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed (overrides the config file)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config file)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Disable conditioning components (repeatable): cfpm, adu, ttm
    #[arg(long, value_name = "COMPONENT")]
    disable: Vec<String>,
    /// Motion fusion variant: ide, traj_condition, traj_concat, ego_video_feats
    #[arg(long)]
    fuse_mode: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural paired ego/exo dataset
    GenData {
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Train stage 1 (latent flow autoencoder) or stage 2 (conditional
    /// diffusion)
    Train {
        #[command(flatten)]
        common: CommonOverrides,
        /// Training stage
        #[arg(long)]
        stage: Option<u32>,
        /// Stage-1 checkpoint (required for stage 2)
        #[arg(long)]
        stage1_ckpt: Option<PathBuf>,
    },
    /// Generate an exocentric clip from a stage-2 checkpoint
    Generate {
        #[command(flatten)]
        common: CommonOverrides,
        /// Stage-2 checkpoint path
        #[arg(long)]
        ckpt: PathBuf,
        /// Clip id from the configured dataset
        #[arg(long)]
        clip: Option<String>,
        /// First exocentric frame (PPM), alternative to --clip
        #[arg(long)]
        exo: Option<PathBuf>,
        /// First egocentric frame (PPM)
        #[arg(long)]
        ego: Option<PathBuf>,
        /// Trajectory CSV (frame,x,y,theta)
        #[arg(long)]
        traj: Option<PathBuf>,
        /// Action description tokens, e.g. "approach red box"
        #[arg(long)]
        desc: Option<String>,
        /// Write per-step sampler tensors and flow/occlusion
        /// visualizations
        #[arg(long)]
        dump_steps: bool,
    },
    /// Compare a generated directory against a reference directory
    Evaluate {
        /// Directory of generated clips
        #[arg(long)]
        gen: PathBuf,
        /// Directory of reference clips (dataset root works)
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Report CSV path
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
    },
    /// Run the finite-difference verification suite over every
    /// differentiable op and the composite model checks
    Gradcheck,
}

fn load_config(common: &CommonOverrides) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::parse_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.clone());
    }
    for component in &common.disable {
        match component.as_str() {
            "cfpm" => cfg.disable.disable_cfpm = true,
            "adu" => cfg.disable.disable_adu = true,
            "ttm" => cfg.disable.disable_ttm = true,
            other => {
                return Err(PipelineError::Config(ide_core::pipeline::ConfigError::BadValue {
                    key: "--disable".into(),
                    value: other.into(),
                }))
            }
        }
    }
    if let Some(fuse) = &common.fuse_mode {
        cfg.fuse_mode = FuseMode::parse(fuse).ok_or_else(|| {
            PipelineError::Config(ide_core::pipeline::ConfigError::BadValue {
                key: "--fuse-mode".into(),
                value: fuse.clone(),
            })
        })?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = load_config(&common)?;
            let ds = cmd_gen_data(&cfg, cfg.seed)?;
            println!(
                "dataset written to {} ({} clips, manifest.tsv present)",
                ds.root.display(),
                ds.entries.len()
            );
            Ok(())
        }
        Command::Train { common, stage, stage1_ckpt } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = stage {
                cfg.stage = s;
            }
            let ckpt = cmd_train(&cfg, cfg.stage, stage1_ckpt.as_deref(), cfg.seed)?;
            println!("final checkpoint: {}", ckpt.display());
            Ok(())
        }
        Command::Generate { common, ckpt, clip, exo, ego, traj, desc, dump_steps } => {
            let cfg = load_config(&common)?;
            let out = cfg
                .out_dir
                .clone()
                .ok_or(PipelineError::Config(ide_core::pipeline::ConfigError::MissingKey(
                    "out_dir".into(),
                )))?;
            let written = cmd_generate(&GenerateArgs {
                ckpt,
                config: Some(cfg.clone()),
                clip,
                exo,
                ego,
                traj,
                desc,
                seed: cfg.seed,
                out,
                dump_steps,
            })?;
            println!("wrote {} files", written.len());
            Ok(())
        }
        Command::Evaluate { gen, reference, out } => {
            let report = cmd_evaluate(&gen, &reference, &out)?;
            println!(
                "clips={} lpips_surr={:.6} fvd={:.6} kvd={:.6} -> {}",
                report.clips,
                report.lpips_surr,
                report.fvd,
                report.kvd,
                out.display()
            );
            Ok(())
        }
        Command::Gradcheck => {
            let corrupt = std::env::var("IDE_GRADCHECK_CORRUPT").ok();
            let (outcomes, all_pass) = cmd_gradcheck(corrupt.as_deref());
            for o in &outcomes {
                println!(
                    "{:<24} max rel err {:.3e}  (tol {:.0e})  {}",
                    o.name,
                    o.max_rel_err,
                    o.tol,
                    if o.pass { "PASS" } else { "FAIL" }
                );
            }
            let (covered, total) = gradcheck_coverage(&outcomes);
            println!("op coverage: {covered}/{total}");
            if !all_pass || covered != total {
                let failed = outcomes.iter().filter(|o| !o.pass).count();
                return Err(PipelineError::GradcheckFailed(failed.max(1)));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
