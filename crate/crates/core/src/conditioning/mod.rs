//! Condition-bundle construction for the diffusion model: trajectory
//! transformation (temporal fusion of ego tokens with the head
//! trajectory, then dynamic exo updating), the action description unit,
//! and the ablation/fuse-mode variants.

pub mod adu;
pub mod egofeat;
pub mod ttm;

pub use adu::AduModel;
pub use egofeat::{ego_video_features, EGO_FEAT_DIM};
pub use ttm::{encode_trajectory_features, TtmModel};

use crate::cfpm::{align_loss, CfpmConfig, CfpmModel};
use crate::tensor::gradcheck::{fd_check_store, CustomCheck};
use crate::tensor::{Array, Binding, ParamStore, Real, Rng, Var};
use crate::worldsim::{DataError, Pose};

/// How egocentric motion enters the conditioning path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FuseMode {
    /// Full path: temporal fusion + exo update.
    Ide,
    /// Trajectory features fed straight to the diffusion conditions.
    TrajCondition,
    /// Trajectory concatenated with the ego class token, fused by a
    /// transformer layer, then the usual exo update.
    TrajConcat,
    /// Per-frame features of the whole ego video from a fixed random
    /// spatiotemporal net replace the trajectory features.
    EgoVideoFeats,
}

impl FuseMode {
    pub fn parse(s: &str) -> Option<FuseMode> {
        match s {
            "ide" => Some(FuseMode::Ide),
            "traj_condition" => Some(FuseMode::TrajCondition),
            "traj_concat" => Some(FuseMode::TrajConcat),
            "ego_video_feats" => Some(FuseMode::EgoVideoFeats),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FuseMode::Ide => "ide",
            FuseMode::TrajCondition => "traj_condition",
            FuseMode::TrajConcat => "traj_concat",
            FuseMode::EgoVideoFeats => "ego_video_feats",
        }
    }
}

/// Table-3-style component switches. A disabled module registers no
/// parameters, so its tensors are absent from checkpoints.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AblationFlags {
    pub disable_cfpm: bool,
    pub disable_adu: bool,
    pub disable_ttm: bool,
}

#[derive(Clone, Debug)]
pub struct CondConfig {
    pub cfpm: CfpmConfig,
    pub frames: usize,
    pub vocab_len: usize,
    pub fuse: FuseMode,
    pub flags: AblationFlags,
    /// Stop the alignment-loss gradient on the ego side (off by
    /// default; both sides train).
    pub stop_ego_align_grad: bool,
}

impl CondConfig {
    pub fn toy() -> Self {
        CondConfig {
            cfpm: CfpmConfig::toy(),
            frames: 3,
            vocab_len: 5,
            fuse: FuseMode::Ide,
            flags: AblationFlags::default(),
            stop_ego_align_grad: false,
        }
    }
}

/// Inputs of one condition build. Patch projections, the first-frame
/// latent, and ego-video features come precomputed: they flow through
/// frozen transforms only, so callers cache them per clip.
pub struct CondInputs<'a, T: Real> {
    /// [L,C] projected patches of the first exo frame
    pub exo_patches: &'a Array<T>,
    /// [L,C] projected patches of the first ego frame
    pub ego_patches: &'a Array<T>,
    pub traj: &'a [Pose],
    /// room extent, for trajectory normalization
    pub size: usize,
    pub desc: &'a [usize],
    /// [C_lat,h,w] frozen-encoder latent of the first exo frame
    pub z: &'a Array<T>,
    /// [T, EGO_FEAT_DIM] fixed-net ego video features (EgoVideoFeats)
    pub ego_feats: Option<&'a Array<T>>,
}

/// The assembled condition: per-frame token matrices for denoiser
/// cross-attention, the first-frame latent, and (when CFPM runs) the
/// class-token pair the alignment loss applies to.
pub struct Condition {
    pub tokens_per_frame: Vec<Var>,
    pub z: Var,
    pub align_cls: Option<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct Conditioner {
    pub cfg: CondConfig,
    pub cfpm: CfpmModel,
    pub ttm: Option<TtmModel>,
    pub adu: Option<AduModel>,
}

impl Conditioner {
    pub fn init<T: Real>(params: &mut ParamStore<T>, cfg: &CondConfig, seed: u64) -> Self {
        let cfpm = CfpmModel::init(params, &cfg.cfpm, seed);
        let ttm = if cfg.flags.disable_ttm {
            None
        } else {
            Some(TtmModel::init(params, cfg.cfpm.width, cfg.cfpm.heads, cfg.fuse, seed))
        };
        let adu = if cfg.flags.disable_adu {
            None
        } else {
            Some(AduModel::init(params, cfg.vocab_len, cfg.cfpm.width, seed))
        };
        Conditioner { cfg: cfg.clone(), cfpm, ttm, adu }
    }

    pub fn restore(cfg: &CondConfig) -> Self {
        let mut scratch: ParamStore<f32> = ParamStore::new();
        Conditioner::init(&mut scratch, cfg, 0)
    }

    /// Run CFPM (or the raw embedding when disabled), the configured
    /// motion-fusion path, and the ADU; assemble per-frame condition
    /// tokens.
    pub fn build<T: Real>(
        &self,
        b: &mut Binding<T>,
        inputs: &CondInputs<'_, T>,
    ) -> Result<Condition, DataError> {
        assert_eq!(inputs.traj.len(), self.cfg.frames, "trajectory length != configured frames");
        for p in inputs.traj {
            assert!(
                p.x.is_finite() && p.y.is_finite() && p.theta.is_finite(),
                "numeric error: non-finite pose in trajectory"
            );
        }
        let e_exo = self.cfpm.embed(b, inputs.exo_patches);
        let e_ego = self.cfpm.embed(b, inputs.ego_patches);
        let (y_exo, y_ego, align_cls) = if self.cfg.flags.disable_cfpm {
            (e_exo, e_ego, None)
        } else {
            let out = self.cfpm.forward(b, &e_exo, &e_ego);
            (out.y_exo, out.y_ego, Some((out.cls_exo_ca, out.cls_ego_ca)))
        };

        let t_frames = self.cfg.frames;
        let mut extra_traj_tokens: Option<Vec<Var>> = None;
        let r_exo: Vec<Var> = match &self.ttm {
            None => {
                let tokens = y_exo.tokens(b);
                vec![tokens; t_frames]
            }
            Some(ttm) => match self.cfg.fuse {
                FuseMode::Ide => {
                    let tf = ttm.encode_trajectory(b, inputs.traj, inputs.size);
                    let r_ego = ttm.temporal_fuse(b, &y_ego, tf);
                    ttm.exo_update(b, &y_exo, &r_ego)
                }
                FuseMode::TrajCondition => {
                    let tf = ttm.encode_trajectory(b, inputs.traj, inputs.size);
                    let toks = (0..t_frames).map(|t| b.tape.slice0(tf, t, 1)).collect();
                    extra_traj_tokens = Some(toks);
                    let tokens = y_exo.tokens(b);
                    vec![tokens; t_frames]
                }
                FuseMode::TrajConcat => {
                    let tf = ttm.encode_trajectory(b, inputs.traj, inputs.size);
                    let r_ego = ttm.concat_fuse(b, &y_ego, tf);
                    ttm.exo_update(b, &y_exo, &r_ego)
                }
                FuseMode::EgoVideoFeats => {
                    let feats = inputs
                        .ego_feats
                        .expect("ego_video_feats mode requires precomputed ego features");
                    assert_eq!(feats.shape, vec![t_frames, EGO_FEAT_DIM]);
                    let vf = ttm.project_ego_feats(b, feats);
                    let r_ego = ttm.temporal_fuse(b, &y_ego, vf);
                    ttm.exo_update(b, &y_exo, &r_ego)
                }
            },
        };

        let t_text = match &self.adu {
            Some(adu) => Some(adu.encode_text(b, inputs.desc)?),
            None => None,
        };

        let mut tokens_per_frame = Vec::with_capacity(t_frames);
        for (t, &r) in r_exo.iter().enumerate() {
            let mut toks = r;
            if let Some(extra) = &extra_traj_tokens {
                toks = b.tape.concat0(toks, extra[t]);
            }
            if let Some(tt) = t_text {
                toks = b.tape.concat0(toks, tt);
            }
            tokens_per_frame.push(toks);
        }
        let z = b.tape.constant(inputs.z.clone());
        Ok(Condition { tokens_per_frame, z, align_cls })
    }

    /// L_align for this build; zero when CFPM is disabled.
    pub fn alignment_loss<T: Real>(&self, b: &mut Binding<T>, cond: &Condition) -> Var {
        match cond.align_cls {
            Some((exo, ego)) => align_loss(b, exo, ego, self.cfg.stop_ego_align_grad),
            None => b.tape.constant(Array::scalar(T::ZERO)),
        }
    }
}

/// 64-bit finite-difference check of the full conditioning stack at toy
/// width.
pub fn conditioning_gradcheck() -> CustomCheck {
    CustomCheck {
        name: "conditioning_toy",
        tol: 1e-4,
        run: Box::new(|| {
            let cfg = CondConfig::toy();
            let mut params: ParamStore<f64> = ParamStore::new();
            let cond = Conditioner::init(&mut params, &cfg, 51);
            let mut rng = Rng::from_seed(52);
            let l = cfg.cfpm.num_patches();
            let c = cfg.cfpm.width;
            let exo_p = Array::from_vec(vec![l, c], rng.normal_vec(l * c, 1.0));
            let ego_p = Array::from_vec(vec![l, c], rng.normal_vec(l * c, 1.0));
            let z = Array::from_vec(vec![2, 2, 2], rng.normal_vec(8, 1.0));
            let traj = vec![
                Pose { x: 3.0, y: 4.0, theta: 0.2 },
                Pose { x: 4.0, y: 5.0, theta: 0.4 },
                Pose { x: 5.5, y: 5.5, theta: 0.9 },
            ];
            let subset = [
                "ttm.fuse.wq",
                "ttm.traj.w1",
                "ttm.exo_tx.mlp.w2",
                "adu.embed",
                "adu.proj.w",
                "cfpm.cls",
            ];
            fd_check_store(&params, &subset, &[], &|b, _| {
                let inputs = CondInputs {
                    exo_patches: &exo_p,
                    ego_patches: &ego_p,
                    traj: &traj,
                    size: 16,
                    desc: &[0, 2, 4],
                    z: &z,
                    ego_feats: None,
                };
                let built = cond.build(b, &inputs).expect("toy build");
                let mut acc = cond.alignment_loss(b, &built);
                for &tok in &built.tokens_per_frame {
                    let m = b.tape.mean(tok);
                    acc = b.tape.add(acc, m);
                }
                acc
            })
        }),
    }
}
