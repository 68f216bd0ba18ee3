//! Cross-view feature perception: frozen random patch embedding with
//! learned positions and class token, class-token cross-attention
//! between the two views, per-view transformer update, and the KL
//! alignment loss between the exchanged class tokens.

use crate::nn::{AttentionParams, TransformerLayer};
use crate::tensor::gradcheck::{fd_check_store, CustomCheck};
use crate::tensor::kernels::matmul_nn;
use crate::tensor::{Array, Binding, ParamStore, Real, Rng, Var};

#[derive(Clone, Debug)]
pub struct CfpmConfig {
    pub size: usize,
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
}

impl Default for CfpmConfig {
    fn default() -> Self {
        CfpmConfig { size: 64, patch: 8, width: 64, heads: 4 }
    }
}

impl CfpmConfig {
    pub fn tokens_per_side(&self) -> usize {
        assert_eq!(
            self.size % self.patch,
            0,
            "frame size {} not divisible by patch {}",
            self.size,
            self.patch
        );
        self.size / self.patch
    }

    /// L, the patch-token count.
    pub fn num_patches(&self) -> usize {
        let n = self.tokens_per_side();
        n * n
    }

    pub fn toy() -> Self {
        CfpmConfig { size: 16, patch: 8, width: 8, heads: 2 }
    }
}

/// One class token plus L patch tokens for one view.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid {
    /// [1, C]
    pub cls: Var,
    /// [L, C]
    pub patch: Var,
}

impl TokenGrid {
    pub fn tokens<T: Real>(&self, b: &mut Binding<T>) -> Var {
        b.tape.concat0(self.cls, self.patch)
    }
}

/// Non-overlapping P x P patches flattened to rows: [L, 3*P*P].
pub fn patchify<T: Real>(frame: &Array<T>, patch: usize) -> Array<T> {
    let s = frame.shape[1];
    assert_eq!(frame.shape[0], 3, "patchify expects [3,S,S]");
    assert_eq!(s % patch, 0, "frame size {s} not divisible by patch {patch}");
    let side = s / patch;
    let mut out = Vec::with_capacity(side * side * 3 * patch * patch);
    for py in 0..side {
        for px in 0..side {
            for c in 0..3 {
                for dy in 0..patch {
                    for dx in 0..patch {
                        out.push(frame.chw(c, py * patch + dy, px * patch + dx));
                    }
                }
            }
        }
    }
    Array::from_vec(vec![side * side, 3 * patch * patch], out)
}

/// Frozen random projection of patch rows to model width: [L, C].
/// Plain math: the projection never receives gradient, so this runs off
/// the tape and per-clip results can be cached.
pub fn project_patches<T: Real>(frame: &Array<T>, proj: &Array<T>, patch: usize) -> Array<T> {
    let p = patchify(frame, patch);
    let (l, d) = (p.shape[0], p.shape[1]);
    assert_eq!(proj.shape[0], d, "projection rows {:?} vs patch dim {d}", proj.shape);
    let c = proj.shape[1];
    let mut out = vec![T::ZERO; l * c];
    matmul_nn(&p.data, &proj.data, l, d, c, &mut out);
    Array::from_vec(vec![l, c], out)
}

/// The outputs of one cross-view pass: updated token grids plus the
/// exchanged class tokens the alignment loss is defined on.
pub struct CfpmOutput {
    pub y_exo: TokenGrid,
    pub y_ego: TokenGrid,
    /// class tokens right after cross-attention (pre-transformer)
    pub cls_exo_ca: Var,
    pub cls_ego_ca: Var,
}

#[derive(Clone, Debug)]
pub struct CfpmModel {
    pub cfg: CfpmConfig,
    ca_ego: AttentionParams,
    ca_exo: AttentionParams,
    tx_ego: TransformerLayer,
    tx_exo: TransformerLayer,
}

impl CfpmModel {
    pub fn init<T: Real>(params: &mut ParamStore<T>, cfg: &CfpmConfig, seed: u64) -> Self {
        let c = cfg.width;
        let d = 3 * cfg.patch * cfg.patch;
        let l = cfg.num_patches();
        // the patch projection stands in for a frozen pretrained
        // encoder: drawn once, stored, never updated
        let mut rng = Rng::derive(seed, "cfpm.embed.proj");
        let proj = Array::from_vec(vec![d, c], rng.normal_vec(d * c, 1.0 / (d as f64).sqrt()));
        params.insert_frozen("cfpm.embed.proj", proj);
        params.init_normal("cfpm.embed.pos", vec![l, c], 0.02, seed);
        params.init_normal("cfpm.cls", vec![1, c], 0.02, seed);
        CfpmModel {
            cfg: cfg.clone(),
            ca_ego: AttentionParams::init(params, "cfpm.ca.ego", c, cfg.heads, seed),
            ca_exo: AttentionParams::init(params, "cfpm.ca.exo", c, cfg.heads, seed),
            tx_ego: TransformerLayer::init(params, "cfpm.tx.ego", c, cfg.heads, seed),
            tx_exo: TransformerLayer::init(params, "cfpm.tx.exo", c, cfg.heads, seed),
        }
    }

    pub fn restore(cfg: &CfpmConfig) -> Self {
        let mut scratch: ParamStore<f32> = ParamStore::new();
        CfpmModel::init(&mut scratch, cfg, 0)
    }

    /// Tokenize a frame whose patches were already projected (see
    /// [`project_patches`]): add the learned positional embedding and
    /// prepend the learned class token.
    pub fn embed<T: Real>(&self, b: &mut Binding<T>, projected: &Array<T>) -> TokenGrid {
        assert_eq!(
            projected.shape,
            vec![self.cfg.num_patches(), self.cfg.width],
            "projected patches have the wrong shape"
        );
        let raw = b.tape.constant(projected.clone());
        let pos = b.param("cfpm.embed.pos");
        let patch = b.tape.add(raw, pos);
        let cls = b.param("cfpm.cls");
        TokenGrid { cls, patch }
    }

    /// Exchange class tokens across views, then run one transformer
    /// layer per view over [y_cls, e_patch].
    pub fn forward<T: Real>(
        &self,
        b: &mut Binding<T>,
        e_exo: &TokenGrid,
        e_ego: &TokenGrid,
    ) -> CfpmOutput {
        let l = self.cfg.num_patches();
        let cls_ego_ca = self.ca_ego.cross(b, e_ego.cls, Some(e_exo.patch));
        let cls_exo_ca = self.ca_exo.cross(b, e_exo.cls, Some(e_ego.patch));
        let ego_tokens = b.tape.concat0(cls_ego_ca, e_ego.patch);
        let exo_tokens = b.tape.concat0(cls_exo_ca, e_exo.patch);
        let y_ego_all = self.tx_ego.forward(b, ego_tokens);
        let y_exo_all = self.tx_exo.forward(b, exo_tokens);
        CfpmOutput {
            y_exo: TokenGrid {
                cls: b.tape.slice0(y_exo_all, 0, 1),
                patch: b.tape.slice0(y_exo_all, 1, l),
            },
            y_ego: TokenGrid {
                cls: b.tape.slice0(y_ego_all, 0, 1),
                patch: b.tape.slice0(y_ego_all, 1, l),
            },
            cls_exo_ca,
            cls_ego_ca,
        }
    }

    /// Tie the ego-branch parameters to the exo branch (tests of the
    /// mirror symmetry).
    pub fn tie_branches<T: Real>(params: &mut ParamStore<T>) {
        for proj in ["wq", "wk", "wv", "wo"] {
            let v = params.get(&format!("cfpm.ca.exo.{proj}")).clone();
            *params.get_mut(&format!("cfpm.ca.ego.{proj}")) = v;
        }
        for name in [
            "wq", "wk", "wv", "wo", "ln1.g", "ln1.b", "ln2.g", "ln2.b", "mlp.w1", "mlp.b1",
            "mlp.w2", "mlp.b2",
        ] {
            let v = params.get(&format!("cfpm.tx.exo.{name}")).clone();
            *params.get_mut(&format!("cfpm.tx.ego.{name}")) = v;
        }
    }

    /// Zero every value/MLP output weight so the whole module becomes
    /// the identity on tokens.
    pub fn zero_values<T: Real>(&self, params: &mut ParamStore<T>) {
        for branch in ["ego", "exo"] {
            let wv = params.get_mut(&format!("cfpm.ca.{branch}.wv"));
            *wv = Array::zeros(wv.shape.clone());
        }
        self.tx_ego.zero_out(params);
        self.tx_exo.zero_out(params);
    }
}

/// KL(softmax(cls_exo) || softmax(cls_ego)) over the channel axis.
/// Gradient flows into both arguments unless `stop_ego_grad`.
pub fn align_loss<T: Real>(
    b: &mut Binding<T>,
    cls_exo: Var,
    cls_ego: Var,
    stop_ego_grad: bool,
) -> Var {
    assert!(
        b.tape.data(cls_exo).all_finite() && b.tape.data(cls_ego).all_finite(),
        "numeric error: non-finite class token in align_loss"
    );
    let ego = if stop_ego_grad {
        let detached = b.tape.data(cls_ego).clone();
        b.tape.constant(detached)
    } else {
        cls_ego
    };
    let ls_exo = b.tape.log_softmax(cls_exo, 1);
    let ls_ego = b.tape.log_softmax(ego, 1);
    let p_exo = b.tape.exp(ls_exo);
    let diff = b.tape.sub(ls_exo, ls_ego);
    let terms = b.tape.mul(p_exo, diff);
    b.tape.sum(terms)
}

/// 64-bit finite-difference check of the whole module at toy width.
pub fn cfpm_gradcheck() -> CustomCheck {
    CustomCheck {
        name: "cfpm_toy",
        tol: 1e-4,
        run: Box::new(|| {
            let cfg = CfpmConfig::toy();
            let mut params: ParamStore<f64> = ParamStore::new();
            let model = CfpmModel::init(&mut params, &cfg, 31);
            let mut rng = Rng::from_seed(32);
            let l = cfg.num_patches();
            let pre_exo = Array::from_vec(vec![l, cfg.width], rng.normal_vec(l * cfg.width, 1.0));
            let pre_ego = Array::from_vec(vec![l, cfg.width], rng.normal_vec(l * cfg.width, 1.0));
            let subset = [
                "cfpm.embed.pos",
                "cfpm.cls",
                "cfpm.ca.ego.wq",
                "cfpm.ca.exo.wv",
                "cfpm.tx.exo.mlp.w1",
                "cfpm.tx.ego.ln1.g",
            ];
            fd_check_store(&params, &subset, &[], &|b, _| {
                let e_exo = model.embed(b, &pre_exo);
                let e_ego = model.embed(b, &pre_ego);
                let out = model.forward(b, &e_exo, &e_ego);
                let l_align = align_loss(b, out.cls_exo_ca, out.cls_ego_ca, false);
                // fold the token outputs in so every parameter matters
                let yt = out.y_exo.tokens(b);
                let ym = b.tape.mean(yt);
                let gt = out.y_ego.tokens(b);
                let gm = b.tape.mean(gt);
                let s = b.tape.add(ym, gm);
                b.tape.add(l_align, s)
            })
        }),
    }
}
