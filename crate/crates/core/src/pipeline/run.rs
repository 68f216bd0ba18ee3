//! Orchestration of the two-stage train / generate / evaluate workflow
//! plus the gradient-verification harness.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::checkpoint::{load_checkpoint, save_checkpoint, CkptError};
use super::config::{ConfigError, RunConfig};
use crate::cfpm::project_patches;
use crate::conditioning::{ego_video_features, CondInputs, Conditioner, FuseMode};
use crate::diffusion::{
    make_schedule, sample_sequence, train_stage2, CondArrays, Denoiser, FlowFieldSeq,
};
use crate::lfae::{eval_stage1, train_stage1, LfaeModel};
use crate::metrics::{evaluate, report_csv, EvalError};
use crate::tensor::gradcheck::{basic_checks, run_check, CheckOutcome, DIFFERENTIABLE_OPS};
use crate::tensor::{Array, Binding, ParamStore};
use crate::worldsim::dataset::{parse_traj_csv, read_frames, write_frames};
use crate::worldsim::ppm::{read_ppm, write_ppm};
use crate::worldsim::render::u8_to_frame;
use crate::worldsim::{generate_dataset, DataError, Dataset, Pose};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("clip {0:?} not found in the dataset manifest")]
    ClipNotFound(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("gradient checks failed: {0} op(s) out of tolerance")]
    GradcheckFailed(usize),
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl PipelineError {
    /// 0 ok, 2 config error, 3 missing prerequisite, 4 data mismatch,
    /// 5 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(d) => match d {
                DataError::InvalidConfig(_) => 2,
                DataError::MissingPrerequisite(_) => 3,
                DataError::Numeric(_) => 5,
                _ => 4,
            },
            PipelineError::Ckpt(c) => match c {
                CkptError::Io { .. } => 3,
                _ => 4,
            },
            PipelineError::Eval(e) => match e {
                EvalError::NonFinite => 5,
                _ => 4,
            },
            PipelineError::ClipNotFound(_) => 4,
            PipelineError::CheckpointMismatch(_) => 4,
            PipelineError::GradcheckFailed(_) => 5,
            PipelineError::Io { .. } => 4,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io { path: path.display().to_string(), source }
}

fn require_dataset(cfg: &RunConfig) -> Result<&PathBuf, PipelineError> {
    cfg.dataset.as_ref().ok_or(PipelineError::Config(ConfigError::MissingKey("dataset".into())))
}

fn require_out_dir(cfg: &RunConfig) -> Result<&PathBuf, PipelineError> {
    cfg.out_dir.as_ref().ok_or(PipelineError::Config(ConfigError::MissingKey("out_dir".into())))
}

/// Generate the dataset named in the config.
pub fn cmd_gen_data(cfg: &RunConfig, seed: u64) -> Result<Dataset, PipelineError> {
    let root = require_dataset(cfg)?.clone();
    let ds = generate_dataset(&cfg.world_config(), seed, &root)?;
    Ok(ds)
}

fn meta_of(cfg: &RunConfig, stage: u32, vocab_len: usize) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    m.insert("stage".into(), stage as f64);
    m.insert("size".into(), cfg.size as f64);
    m.insert("frames".into(), cfg.frames as f64);
    m.insert("steps".into(), cfg.steps as f64);
    m.insert("beta_min".into(), cfg.beta_min);
    m.insert("beta_max".into(), cfg.beta_max);
    m.insert("lambda".into(), cfg.lambda);
    m.insert("vocab_len".into(), vocab_len as f64);
    let fuse = match cfg.fuse_mode {
        FuseMode::Ide => 0.0,
        FuseMode::TrajCondition => 1.0,
        FuseMode::TrajConcat => 2.0,
        FuseMode::EgoVideoFeats => 3.0,
    };
    m.insert("fuse_mode".into(), fuse);
    m.insert("disable_cfpm".into(), cfg.disable.disable_cfpm as i32 as f64);
    m.insert("disable_adu".into(), cfg.disable.disable_adu as i32 as f64);
    m.insert("disable_ttm".into(), cfg.disable.disable_ttm as i32 as f64);
    let dm = match cfg.dm_loss {
        crate::diffusion::DmLossMode::L2Sq => 0.0,
        crate::diffusion::DmLossMode::L2 => 1.0,
        crate::diffusion::DmLossMode::L1 => 2.0,
    };
    m.insert("dm_loss".into(), dm);
    m
}

/// Rebuild the run configuration a checkpoint was trained under.
pub fn run_config_from_meta(meta: &BTreeMap<String, f64>) -> Result<RunConfig, PipelineError> {
    let get = |k: &str| -> Result<f64, PipelineError> {
        meta.get(k)
            .copied()
            .ok_or_else(|| PipelineError::CheckpointMismatch(format!("meta key {k} missing")))
    };
    let mut cfg = RunConfig {
        size: get("size")? as usize,
        frames: get("frames")? as usize,
        steps: get("steps")? as usize,
        beta_min: get("beta_min")?,
        beta_max: get("beta_max")?,
        lambda: get("lambda")?,
        stage: get("stage")? as u32,
        ..RunConfig::default()
    };
    cfg.fuse_mode = match get("fuse_mode")? as i64 {
        0 => FuseMode::Ide,
        1 => FuseMode::TrajCondition,
        2 => FuseMode::TrajConcat,
        3 => FuseMode::EgoVideoFeats,
        other => {
            return Err(PipelineError::CheckpointMismatch(format!("bad fuse_mode {other}")))
        }
    };
    cfg.disable.disable_cfpm = get("disable_cfpm")? != 0.0;
    cfg.disable.disable_adu = get("disable_adu")? != 0.0;
    cfg.disable.disable_ttm = get("disable_ttm")? != 0.0;
    cfg.dm_loss = match get("dm_loss")? as i64 {
        0 => crate::diffusion::DmLossMode::L2Sq,
        1 => crate::diffusion::DmLossMode::L2,
        2 => crate::diffusion::DmLossMode::L1,
        other => return Err(PipelineError::CheckpointMismatch(format!("bad dm_loss {other}"))),
    };
    Ok(cfg)
}

pub fn vocab_len_from_meta(meta: &BTreeMap<String, f64>) -> Result<usize, PipelineError> {
    meta.get("vocab_len")
        .map(|v| *v as usize)
        .ok_or_else(|| PipelineError::CheckpointMismatch("meta key vocab_len missing".into()))
}

fn echo_config(cfg: &RunConfig, out_dir: &Path) -> Result<(), PipelineError> {
    let echo = cfg.echo();
    print!("{echo}");
    let path = out_dir.join("run_config_echo.txt");
    std::fs::write(&path, echo).map_err(|e| io_err(&path, e))
}

/// Train the requested stage; returns the final checkpoint path.
pub fn cmd_train(
    cfg: &RunConfig,
    stage: u32,
    stage1_ckpt: Option<&Path>,
    seed: u64,
) -> Result<PathBuf, PipelineError> {
    let dataset_root = require_dataset(cfg)?.clone();
    let out_dir = require_out_dir(cfg)?.clone();
    std::fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;
    echo_config(cfg, &out_dir)?;
    let dataset = Dataset::load(&dataset_root)?;
    let log_path = out_dir.join("train_log.csv");
    if log_path.exists() {
        std::fs::remove_file(&log_path).map_err(|e| io_err(&log_path, e))?;
    }
    match stage {
        1 => {
            let s1 = cfg.stage1_config();
            s1.validate()?;
            let ckpt_every = cfg.ckpt_every;
            let out_dir2 = out_dir.clone();
            let meta = meta_of(cfg, 1, dataset.vocab.len());
            let params = train_stage1(&dataset, &s1, seed, |log, params| {
                let _ = crate::lfae::train::append_log_row(&log_path, log);
                if ckpt_every > 0 && log.iter % ckpt_every == 0 && log.iter < s1.iterations {
                    let p = out_dir2.join(format!("stage1_iter{:06}.ckpt", log.iter));
                    let _ = save_checkpoint(&p, params, &meta);
                }
            })?;
            let final_path = out_dir.join("stage1.ckpt");
            save_checkpoint(&final_path, &params, &meta)?;
            Ok(final_path)
        }
        2 => {
            let s1_path = stage1_ckpt.ok_or_else(|| {
                PipelineError::Data(DataError::MissingPrerequisite(
                    "stage 2 requires --stage1-ckpt".into(),
                ))
            })?;
            let (stage1_params, _s1_meta) = load_checkpoint(s1_path)?;
            let s2 = cfg.stage2_config(dataset.vocab.len());
            let ckpt_every = cfg.ckpt_every;
            let out_dir2 = out_dir.clone();
            let meta = meta_of(cfg, 2, dataset.vocab.len());
            let params = train_stage2(&dataset, &stage1_params, &s2, seed, |log, params| {
                let _ = crate::diffusion::train::append_log_row(&log_path, log);
                if ckpt_every > 0 && log.iter % ckpt_every == 0 && log.iter < s2.iterations {
                    let p = out_dir2.join(format!("stage2_iter{:06}.ckpt", log.iter));
                    let _ = save_checkpoint(&p, params, &meta);
                }
            })?;
            let final_path = out_dir.join("stage2.ckpt");
            save_checkpoint(&final_path, &params, &meta)?;
            Ok(final_path)
        }
        other => Err(PipelineError::Config(ConfigError::Invalid(format!(
            "stage must be 1 or 2, got {other}"
        )))),
    }
}

/// Held-out stage losses of a trained checkpoint (acceptance probes).
pub fn held_out_stage1(
    dataset: &Dataset,
    params: &ParamStore<f32>,
    cfg: &RunConfig,
    eval_seed: u64,
) -> Result<f64, PipelineError> {
    let log = eval_stage1(dataset, crate::worldsim::Split::SeenTest, params, &cfg.stage1_config(), eval_seed)?;
    Ok(log.total)
}

pub struct GenerateInputs {
    pub exo_frame: Array<f32>,
    pub ego_frames: Vec<Array<f32>>,
    pub traj: Vec<Pose>,
    pub desc_ids: Vec<usize>,
}

pub struct GenerateArgs {
    pub ckpt: PathBuf,
    pub config: Option<RunConfig>,
    pub clip: Option<String>,
    pub exo: Option<PathBuf>,
    pub ego: Option<PathBuf>,
    pub traj: Option<PathBuf>,
    pub desc: Option<String>,
    pub seed: u64,
    pub out: PathBuf,
    pub dump_steps: bool,
}

fn load_frame(path: &Path, size: usize) -> Result<Array<f32>, PipelineError> {
    let (w, h, rgb) = read_ppm(path)?;
    if w != size || h != size {
        return Err(PipelineError::CheckpointMismatch(format!(
            "frame {} is {w}x{h}, checkpoint expects {size}x{size}",
            path.display()
        )));
    }
    Ok(u8_to_frame(&rgb, size))
}

fn resolve_inputs(
    args: &GenerateArgs,
    cfg: &RunConfig,
    vocab_len: usize,
) -> Result<GenerateInputs, PipelineError> {
    if let Some(clip_id) = &args.clip {
        let root = args
            .config
            .as_ref()
            .and_then(|c| c.dataset.clone())
            .ok_or(PipelineError::Config(ConfigError::MissingKey("dataset".into())))?;
        let dataset = Dataset::load(&root)?;
        if dataset.vocab.len() != vocab_len {
            return Err(PipelineError::CheckpointMismatch(format!(
                "vocabulary size {} does not match checkpoint ({})",
                dataset.vocab.len(),
                vocab_len
            )));
        }
        let idx = dataset
            .entries
            .iter()
            .position(|e| &e.clip_id == clip_id)
            .ok_or_else(|| PipelineError::ClipNotFound(clip_id.clone()))?;
        let clip = dataset.load_clip(idx)?;
        Ok(GenerateInputs {
            exo_frame: clip.exo[0].clone(),
            ego_frames: clip.ego,
            traj: clip.traj,
            desc_ids: clip.desc,
        })
    } else {
        let missing = |k: &str| PipelineError::Config(ConfigError::MissingKey(k.into()));
        let exo = args.exo.as_ref().ok_or_else(|| missing("--exo"))?;
        let ego = args.ego.as_ref().ok_or_else(|| missing("--ego"))?;
        let traj = args.traj.as_ref().ok_or_else(|| missing("--traj"))?;
        let desc = args.desc.as_ref().ok_or_else(|| missing("--desc"))?;
        let root = args
            .config
            .as_ref()
            .and_then(|c| c.dataset.clone())
            .ok_or(PipelineError::Config(ConfigError::MissingKey("dataset".into())))?;
        let dataset = Dataset::load(&root)?;
        let desc_ids = dataset.vocab.encode(desc)?;
        let exo_frame = load_frame(exo, cfg.size)?;
        let ego_frame = load_frame(ego, cfg.size)?;
        let traj = parse_traj_csv(traj)?;
        Ok(GenerateInputs {
            exo_frame,
            ego_frames: vec![ego_frame],
            traj,
            desc_ids,
        })
    }
}

/// Direction-to-hue flow visualization as an RGB frame.
pub fn flow_to_rgb(flow: &Array<f32>) -> Array<f32> {
    let (h, w) = (flow.shape[1], flow.shape[2]);
    let mut max_mag = 1e-6f64;
    for y in 0..h {
        for x in 0..w {
            let fx = flow.chw(0, y, x) as f64;
            let fy = flow.chw(1, y, x) as f64;
            max_mag = max_mag.max((fx * fx + fy * fy).sqrt());
        }
    }
    let mut out = Array::zeros(vec![3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let fx = flow.chw(0, y, x) as f64;
            let fy = flow.chw(1, y, x) as f64;
            let mag = ((fx * fx + fy * fy).sqrt() / max_mag).clamp(0.0, 1.0);
            let hue = fy.atan2(fx).rem_euclid(std::f64::consts::TAU) / std::f64::consts::TAU;
            let (r, g, b) = hsv_to_rgb(hue, 1.0, mag);
            *out.chw_mut(0, y, x) = r as f32;
            *out.chw_mut(1, y, x) = g as f32;
            *out.chw_mut(2, y, x) = b as f32;
        }
    }
    out
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Generate an exo clip from a stage-2 checkpoint: build the condition,
/// sample a latent flow/occlusion sequence, warp the first-frame
/// latent, and decode every frame.
pub fn cmd_generate(args: &GenerateArgs) -> Result<Vec<PathBuf>, PipelineError> {
    let (params, meta) = load_checkpoint(&args.ckpt)?;
    if meta.get("stage").copied() != Some(2.0) {
        return Err(PipelineError::Data(DataError::MissingPrerequisite(
            "generation requires a stage-2 checkpoint".into(),
        )));
    }
    let cfg = run_config_from_meta(&meta)?;
    let vocab_len = vocab_len_from_meta(&meta)?;
    let inputs = resolve_inputs(args, &cfg, vocab_len)?;
    if inputs.traj.len() != cfg.frames {
        return Err(PipelineError::CheckpointMismatch(format!(
            "trajectory has {} poses, checkpoint expects {}",
            inputs.traj.len(),
            cfg.frames
        )));
    }

    let lfae_cfg = cfg.lfae_config();
    let lfae = LfaeModel::restore(&lfae_cfg);
    let cond_cfg = cfg.cond_config(vocab_len);
    let conditioner = Conditioner::restore(&cond_cfg);
    let s2 = cfg.stage2_config(vocab_len);
    let denoiser = Denoiser::restore(&s2.denoiser);
    let sched = make_schedule(s2.steps, s2.beta_min, s2.beta_max);

    // condition arrays from the frozen/trained weights
    let proj = params.get("cfpm.embed.proj");
    let exo_patches = project_patches(&inputs.exo_frame, proj, cond_cfg.cfpm.patch);
    let ego_patches = project_patches(&inputs.ego_frames[0], proj, cond_cfg.cfpm.patch);
    let ego_feats = (cond_cfg.fuse == FuseMode::EgoVideoFeats).then(|| {
        if inputs.ego_frames.len() == cfg.frames {
            ego_video_features(&inputs.ego_frames)
        } else {
            // single-frame input: replicate for the fixed feature net
            let frames: Vec<Array<f32>> = vec![inputs.ego_frames[0].clone(); cfg.frames];
            ego_video_features(&frames)
        }
    });
    let mut b = Binding::new_inference(&params);
    let first = b.tape.constant(inputs.exo_frame.clone());
    let zv = lfae.encode(&mut b, first);
    let z = b.tape.data(zv).clone();
    let cond = conditioner.build(
        &mut b,
        &CondInputs {
            exo_patches: &exo_patches,
            ego_patches: &ego_patches,
            traj: &inputs.traj,
            size: cfg.size,
            desc: &inputs.desc_ids,
            z: &z,
            ego_feats: ego_feats.as_ref(),
        },
    )?;
    let cond_arrays = CondArrays::from_condition(&b, &cond);
    drop(b);

    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let steps_dir = args.out.join("steps");
    let mut dump = |n: usize, frames: &[Array<f32>]| {
        if n.is_multiple_of(10) {
            let mut store: ParamStore<f32> = ParamStore::new();
            for (t, f) in frames.iter().enumerate() {
                store.insert(&format!("x.{t:02}"), f.clone());
            }
            let mut m = BTreeMap::new();
            m.insert("step".to_string(), n as f64);
            let _ = std::fs::create_dir_all(&steps_dir);
            let _ = save_checkpoint(&steps_dir.join(format!("step_{n:03}.ckpt")), &store, &m);
        }
    };
    let observer: Option<crate::diffusion::sampler::StepObserver<'_>> =
        if args.dump_steps { Some(&mut dump) } else { None };
    let seq: FlowFieldSeq =
        sample_sequence(&params, &denoiser, &cond_arrays, &sched, args.seed, observer);

    // warp the first-frame latent by each sampled field and decode
    let mut b = Binding::new_inference(&params);
    let zv = b.tape.constant(z);
    let mut frames = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let f = b.tape.constant(seq.flows[t].clone());
        let m = b.tape.constant(seq.occs[t].clone());
        let warped = lfae.warp(&mut b, zv, f, m);
        let frame = lfae.decode(&mut b, warped);
        frames.push(b.tape.data(frame).clone());
    }
    write_frames(&args.out, &frames)?;
    let mut written: Vec<PathBuf> =
        (0..frames.len()).map(|t| args.out.join(format!("{t:04}.ppm"))).collect();
    if args.dump_steps {
        let viz_dir = args.out.join("viz");
        std::fs::create_dir_all(&viz_dir).map_err(|e| io_err(&viz_dir, e))?;
        for t in 0..cfg.frames {
            let viz = flow_to_rgb(&seq.flows[t]);
            let path = viz_dir.join(format!("flow_{t:04}.ppm"));
            let bytes = crate::worldsim::render::frame_to_u8(&viz);
            write_ppm(&path, viz.shape[2], viz.shape[1], &bytes)?;
            written.push(path);
            let occ = &seq.occs[t];
            let mut occ_rgb = Array::zeros(vec![3, occ.shape[1], occ.shape[2]]);
            for y in 0..occ.shape[1] {
                for x in 0..occ.shape[2] {
                    for c in 0..3 {
                        *occ_rgb.chw_mut(c, y, x) = occ.chw(0, y, x);
                    }
                }
            }
            let path = viz_dir.join(format!("occ_{t:04}.ppm"));
            write_ppm(&path, occ.shape[2], occ.shape[1], &crate::worldsim::render::frame_to_u8(&occ_rgb))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Evaluate a generated directory against a reference directory,
/// writing the CSV report.
pub fn cmd_evaluate(gen: &Path, reference: &Path, out_csv: &Path) -> Result<crate::metrics::Report, PipelineError> {
    // infer the clip length from the first reference clip
    let frames = infer_frames(reference)?;
    let report = evaluate(gen, reference, frames)?;
    std::fs::write(out_csv, report_csv(&report)).map_err(|e| io_err(out_csv, e))?;
    Ok(report)
}

fn infer_frames(root: &Path) -> Result<usize, PipelineError> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| io_err(root, e))?
        .filter_map(|d| d.ok())
        .map(|d| d.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let first = dirs.first().ok_or(PipelineError::Eval(EvalError::TooFewClips(0)))?;
    let sub = first.join("exo");
    let dir = if sub.is_dir() { sub } else { first.clone() };
    Ok(read_frames(&dir)?.len())
}

/// Run every registered finite-difference check (per-op plus composite
/// whole-model checks). `corrupt` is the test hook that perturbs one
/// op's analytic gradient.
pub fn cmd_gradcheck(corrupt: Option<&str>) -> (Vec<CheckOutcome>, bool) {
    let mut outcomes = Vec::new();
    for check in basic_checks() {
        outcomes.push(run_check(&check, corrupt));
    }
    for check in crate::nn::composite_checks() {
        outcomes.push(run_check(&check, corrupt));
    }
    outcomes.push(crate::lfae::train::stage1_gradcheck().outcome());
    outcomes.push(crate::cfpm::cfpm_gradcheck().outcome());
    outcomes.push(crate::conditioning::conditioning_gradcheck().outcome());
    outcomes.push(crate::diffusion::train::stage2_gradcheck().outcome());
    let all_pass = outcomes.iter().all(|o| o.pass);
    (outcomes, all_pass)
}

/// Every differentiable op kind must be exercised by at least one check.
pub fn gradcheck_coverage(outcomes: &[CheckOutcome]) -> (usize, usize) {
    let covered = DIFFERENTIABLE_OPS
        .iter()
        .filter(|op| outcomes.iter().any(|o| o.covers.contains(op)))
        .count();
    (covered, DIFFERENTIABLE_OPS.len())
}
