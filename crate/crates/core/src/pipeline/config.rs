//! Flat key=value run configuration ('#' comments). Unknown keys are
//! rejected; every resolved value is echoed into the run log.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::cfpm::CfpmConfig;
use crate::conditioning::{AblationFlags, CondConfig, FuseMode};
use crate::diffusion::{DenoiserConfig, DmLossMode, Stage2Config};
use crate::lfae::{LfaeConfig, Stage1Config};
use crate::worldsim::WorldConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value:?}")]
    BadValue { key: String, value: String },
    #[error("missing required key {0:?}")]
    MissingKey(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

const KNOWN_KEYS: &[&str] = &[
    "dataset",
    "out_dir",
    "stage",
    "seed",
    "iterations",
    "batch",
    "lr",
    "frames",
    "size",
    "steps",
    "beta_min",
    "beta_max",
    "lambda",
    "fuse_mode",
    "disable",
    "clips",
    "unseen_clips",
    "log_every",
    "ckpt_every",
    "dm_loss",
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub stage: u32,
    pub seed: u64,
    pub iterations: Option<usize>,
    pub batch: Option<usize>,
    pub lr: f64,
    pub frames: usize,
    pub size: usize,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub lambda: f64,
    pub fuse_mode: FuseMode,
    pub disable: AblationFlags,
    pub clips: usize,
    pub unseen_clips: Option<usize>,
    pub log_every: usize,
    pub ckpt_every: usize,
    pub dm_loss: DmLossMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            out_dir: None,
            stage: 1,
            seed: 0,
            iterations: None,
            batch: None,
            lr: 2e-4,
            frames: 8,
            size: 64,
            steps: 100,
            beta_min: 1e-4,
            beta_max: 0.1,
            lambda: 0.1,
            fuse_mode: FuseMode::Ide,
            disable: AblationFlags::default(),
            clips: 256,
            unseen_clips: None,
            log_every: 25,
            ckpt_every: 0,
            dm_loss: DmLossMode::L2Sq,
        }
    }
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen: BTreeMap<String, String> = BTreeMap::new();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Invalid(format!("expected key=value, got {raw:?}")))?;
            let key = key.trim();
            let value = value.trim().to_string();
            if !KNOWN_KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey(key.to_string()));
            }
            seen.insert(key.to_string(), value);
        }
        let bad = |key: &str, value: &str| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        for (key, value) in &seen {
            match key.as_str() {
                "dataset" => cfg.dataset = Some(PathBuf::from(value)),
                "out_dir" => cfg.out_dir = Some(PathBuf::from(value)),
                "stage" => cfg.stage = value.parse().map_err(|_| bad(key, value))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad(key, value))?,
                "iterations" => cfg.iterations = Some(value.parse().map_err(|_| bad(key, value))?),
                "batch" => cfg.batch = Some(value.parse().map_err(|_| bad(key, value))?),
                "lr" => cfg.lr = value.parse().map_err(|_| bad(key, value))?,
                "frames" => cfg.frames = value.parse().map_err(|_| bad(key, value))?,
                "size" => cfg.size = value.parse().map_err(|_| bad(key, value))?,
                "steps" => cfg.steps = value.parse().map_err(|_| bad(key, value))?,
                "beta_min" => cfg.beta_min = value.parse().map_err(|_| bad(key, value))?,
                "beta_max" => cfg.beta_max = value.parse().map_err(|_| bad(key, value))?,
                "lambda" => cfg.lambda = value.parse().map_err(|_| bad(key, value))?,
                "fuse_mode" => {
                    cfg.fuse_mode = FuseMode::parse(value).ok_or_else(|| bad(key, value))?
                }
                "dm_loss" => cfg.dm_loss = DmLossMode::parse(value).ok_or_else(|| bad(key, value))?,
                "disable" => {
                    for part in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                        match part {
                            "cfpm" => cfg.disable.disable_cfpm = true,
                            "adu" => cfg.disable.disable_adu = true,
                            "ttm" => cfg.disable.disable_ttm = true,
                            other => return Err(bad(key, other)),
                        }
                    }
                }
                "clips" => cfg.clips = value.parse().map_err(|_| bad(key, value))?,
                "unseen_clips" => {
                    cfg.unseen_clips = Some(value.parse().map_err(|_| bad(key, value))?)
                }
                "log_every" => cfg.log_every = value.parse().map_err(|_| bad(key, value))?,
                "ckpt_every" => cfg.ckpt_every = value.parse().map_err(|_| bad(key, value))?,
                _ => unreachable!("key set checked above"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
        RunConfig::parse_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.stage == 1 || self.stage == 2) {
            return Err(ConfigError::Invalid(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if ![32, 64, 128].contains(&self.size) {
            return Err(ConfigError::Invalid(format!("size must be 32, 64 or 128, got {}", self.size)));
        }
        if self.frames < 2 || self.frames > 64 {
            return Err(ConfigError::Invalid(format!("frames must be in 2..=64, got {}", self.frames)));
        }
        if self.lambda < 0.0 {
            return Err(ConfigError::Invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.lr <= 0.0 {
            return Err(ConfigError::Invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max && self.beta_max < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "beta range [{}, {}] invalid",
                self.beta_min, self.beta_max
            )));
        }
        if self.steps == 0 {
            return Err(ConfigError::Invalid("steps must be >= 1".into()));
        }
        Ok(())
    }

    /// All resolved values, for the run-log echo.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let kv = [
            ("dataset", self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("stage", self.stage.to_string()),
            ("seed", self.seed.to_string()),
            ("iterations", self.resolved_iterations().to_string()),
            ("batch", self.resolved_batch().to_string()),
            ("lr", format!("{}", self.lr)),
            ("frames", self.frames.to_string()),
            ("size", self.size.to_string()),
            ("steps", self.steps.to_string()),
            ("beta_min", format!("{}", self.beta_min)),
            ("beta_max", format!("{}", self.beta_max)),
            ("lambda", format!("{}", self.lambda)),
            ("fuse_mode", self.fuse_mode.as_str().to_string()),
            ("disable", {
                let mut v = Vec::new();
                if self.disable.disable_cfpm {
                    v.push("cfpm");
                }
                if self.disable.disable_adu {
                    v.push("adu");
                }
                if self.disable.disable_ttm {
                    v.push("ttm");
                }
                v.join(",")
            }),
            ("clips", self.clips.to_string()),
            ("unseen_clips", self.resolved_unseen().to_string()),
            ("log_every", self.log_every.to_string()),
            ("ckpt_every", self.ckpt_every.to_string()),
            ("dm_loss", self.dm_loss.as_str().to_string()),
        ];
        for (k, v) in kv {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn resolved_iterations(&self) -> usize {
        self.iterations.unwrap_or(if self.stage == 1 { 900 } else { 420 })
    }

    pub fn resolved_batch(&self) -> usize {
        self.batch.unwrap_or(if self.stage == 1 { 4 } else { 2 })
    }

    pub fn resolved_unseen(&self) -> usize {
        self.unseen_clips.unwrap_or(self.clips / 4)
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            clips: self.clips,
            unseen_clips: self.resolved_unseen(),
            frames: self.frames,
            size: self.size,
        }
    }

    pub fn lfae_config(&self) -> LfaeConfig {
        LfaeConfig { size: self.size, ..LfaeConfig::default() }
    }

    pub fn stage1_config(&self) -> Stage1Config {
        Stage1Config {
            lfae: self.lfae_config(),
            lambda_per: self.lambda,
            lr: self.lr,
            iterations: self.resolved_iterations(),
            batch: self.resolved_batch(),
            log_every: self.log_every,
        }
    }

    pub fn cond_config(&self, vocab_len: usize) -> CondConfig {
        CondConfig {
            cfpm: CfpmConfig { size: self.size, ..CfpmConfig::default() },
            frames: self.frames,
            vocab_len,
            fuse: self.fuse_mode,
            flags: self.disable,
            stop_ego_align_grad: false,
        }
    }

    pub fn stage2_config(&self, vocab_len: usize) -> Stage2Config {
        let lfae = self.lfae_config();
        Stage2Config {
            denoiser: DenoiserConfig {
                latent: lfae.latent_side(),
                c_lat: lfae.c_lat,
                frames: self.frames,
                cond_width: CfpmConfig::default().width,
                ..DenoiserConfig::default()
            },
            lfae,
            cond: self.cond_config(vocab_len),
            steps: self.steps,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
            lr: self.lr,
            iterations: self.resolved_iterations(),
            batch: self.resolved_batch(),
            log_every: self.log_every,
            dm_loss: self.dm_loss,
        }
    }
}
