use super::egofeat::EGO_FEAT_DIM;
use super::FuseMode;
use crate::cfpm::TokenGrid;
use crate::nn::{AttentionParams, Mlp, TransformerLayer};
use crate::tensor::{Array, Binding, ParamStore, Real, Var};
use crate::worldsim::Pose;

/// Per-frame trajectory features: absolute position normalized by room
/// size, heading as (sin, cos), and frame deltas (zero at frame 0).
pub fn encode_trajectory_features<T: Real>(traj: &[Pose], size: usize) -> Array<T> {
    let s = size as f64;
    let mut data = Vec::with_capacity(traj.len() * 7);
    for (t, p) in traj.iter().enumerate() {
        let (dx, dy, dth) = if t == 0 {
            (0.0, 0.0, 0.0)
        } else {
            let q = &traj[t - 1];
            let mut dth = p.theta - q.theta;
            while dth > std::f64::consts::PI {
                dth -= std::f64::consts::TAU;
            }
            while dth < -std::f64::consts::PI {
                dth += std::f64::consts::TAU;
            }
            (p.x - q.x, p.y - q.y, dth)
        };
        for v in [p.x / s, p.y / s, p.theta.sin(), p.theta.cos(), dx / s, dy / s, dth] {
            data.push(T::from_f64(v));
        }
    }
    Array::from_vec(vec![traj.len(), 7], data)
}

/// Trajectory transformation: fuses ego tokens with per-frame motion
/// features and transfers the result onto the exo tokens.
#[derive(Clone, Debug)]
pub struct TtmModel {
    pub width: usize,
    traj_mlp: Option<Mlp>,
    fuse: Option<AttentionParams>,
    exo_ca: Option<AttentionParams>,
    exo_tx: Option<TransformerLayer>,
    cat_tx: Option<TransformerLayer>,
    has_cat_proj: bool,
    has_ego_proj: bool,
}

impl TtmModel {
    /// Register only the tensors the fuse mode actually uses.
    pub fn init<T: Real>(
        params: &mut ParamStore<T>,
        width: usize,
        heads: usize,
        fuse_mode: FuseMode,
        seed: u64,
    ) -> Self {
        let needs_traj = !matches!(fuse_mode, FuseMode::EgoVideoFeats);
        let needs_fuse = matches!(fuse_mode, FuseMode::Ide | FuseMode::EgoVideoFeats);
        let needs_exo = !matches!(fuse_mode, FuseMode::TrajCondition);
        let traj_mlp =
            needs_traj.then(|| Mlp::init(params, "ttm.traj", 7, width, width, seed));
        let fuse = needs_fuse.then(|| AttentionParams::init(params, "ttm.fuse", width, heads, seed));
        let exo_ca =
            needs_exo.then(|| AttentionParams::init(params, "ttm.exo_ca", width, heads, seed));
        let exo_tx =
            needs_exo.then(|| TransformerLayer::init(params, "ttm.exo_tx", width, heads, seed));
        let cat_tx = matches!(fuse_mode, FuseMode::TrajConcat)
            .then(|| TransformerLayer::init(params, "ttm.cat_tx", width, heads, seed));
        let has_cat_proj = matches!(fuse_mode, FuseMode::TrajConcat);
        if has_cat_proj {
            params.init_he("ttm.cat.w", vec![2 * width, width], 2 * width, seed);
            params.init_zeros("ttm.cat.b", vec![width]);
        }
        let has_ego_proj = matches!(fuse_mode, FuseMode::EgoVideoFeats);
        if has_ego_proj {
            params.init_he("ttm.egoproj.w", vec![EGO_FEAT_DIM, width], EGO_FEAT_DIM, seed);
            params.init_zeros("ttm.egoproj.b", vec![width]);
        }
        TtmModel { width, traj_mlp, fuse, exo_ca, exo_tx, cat_tx, has_cat_proj, has_ego_proj }
    }

    /// Trajectory -> [T, C] through the 2-layer MLP.
    pub fn encode_trajectory<T: Real>(
        &self,
        b: &mut Binding<T>,
        traj: &[Pose],
        size: usize,
    ) -> Var {
        assert!(!traj.is_empty(), "empty trajectory");
        let feats = encode_trajectory_features::<T>(traj, size);
        let fv = b.tape.constant(feats);
        self.traj_mlp.as_ref().expect("trajectory MLP not configured").forward(b, fv)
    }

    /// Fixed-net ego-video features -> [T, C].
    pub fn project_ego_feats<T: Real>(&self, b: &mut Binding<T>, feats: &Array<T>) -> Var {
        assert!(self.has_ego_proj, "ego feature projection not configured");
        let fv = b.tape.constant(feats.clone());
        let w = b.param("ttm.egoproj.w");
        let bias = b.param("ttm.egoproj.b");
        b.tape.linear(fv, w, bias)
    }

    /// Replicate the ego tokens per frame, add that frame's motion
    /// feature, and cross-attend to the full feature sequence:
    /// r_ego[t] = CA(y_ego + f_t, [y_ego + f_t ; f_1..T]).
    pub fn temporal_fuse<T: Real>(
        &self,
        b: &mut Binding<T>,
        y_ego: &TokenGrid,
        motion_feats: Var,
    ) -> Vec<Var> {
        let t_frames = b.tape.shape(motion_feats)[0];
        let tokens = y_ego.tokens(b);
        let fuse = self.fuse.as_ref().expect("temporal fusion attention not configured");
        let mut out = Vec::with_capacity(t_frames);
        for t in 0..t_frames {
            let row = b.tape.slice0(motion_feats, t, 1);
            let vec = b.tape.reshape(row, vec![self.width]);
            let queries = b.tape.add_row_broadcast(tokens, vec);
            out.push(fuse.cross(b, queries, Some(motion_feats)));
        }
        out
    }

    /// Table-4 "trajectory + ego cls concat" variant: project the
    /// concatenation, then a transformer layer over [cls', patches].
    pub fn concat_fuse<T: Real>(
        &self,
        b: &mut Binding<T>,
        y_ego: &TokenGrid,
        traj_feats: Var,
    ) -> Vec<Var> {
        assert!(self.has_cat_proj, "concat fusion not configured");
        let t_frames = b.tape.shape(traj_feats)[0];
        let tx = self.cat_tx.as_ref().expect("concat transformer not configured");
        let w = b.param("ttm.cat.w");
        let bias = b.param("ttm.cat.b");
        let mut out = Vec::with_capacity(t_frames);
        for t in 0..t_frames {
            let row = b.tape.slice0(traj_feats, t, 1);
            let cat = b.tape.concat_cols(y_ego.cls, row);
            let cls = b.tape.linear(cat, w, bias);
            let tokens = b.tape.concat0(cls, y_ego.patch);
            out.push(tx.forward(b, tokens));
        }
        out
    }

    /// Per timestep: query the exo class token against that frame's
    /// fused ego patch tokens, then a transformer layer over
    /// [r_cls, y_patch_exo]. A pure per-timestep map.
    pub fn exo_update<T: Real>(
        &self,
        b: &mut Binding<T>,
        y_exo: &TokenGrid,
        r_ego: &[Var],
    ) -> Vec<Var> {
        let ca = self.exo_ca.as_ref().expect("exo cross-attention not configured");
        let tx = self.exo_tx.as_ref().expect("exo transformer not configured");
        let mut out = Vec::with_capacity(r_ego.len());
        for &r in r_ego {
            let rows = b.tape.shape(r)[0];
            let patches = b.tape.slice0(r, 1, rows - 1);
            let r_cls = ca.cross(b, y_exo.cls, Some(patches));
            let tokens = b.tape.concat0(r_cls, y_exo.patch);
            out.push(tx.forward(b, tokens));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn setup(fuse: FuseMode) -> (ParamStore<f64>, TtmModel) {
        let mut params: ParamStore<f64> = ParamStore::new();
        let ttm = TtmModel::init(&mut params, 8, 2, fuse, 70);
        (params, ttm)
    }

    fn grid(b: &mut Binding<f64>, rng: &mut Rng, l: usize, c: usize) -> TokenGrid {
        let cls = b.tape.constant(Array::from_vec(vec![1, c], rng.normal_vec(c, 1.0)));
        let patch = b.tape.constant(Array::from_vec(vec![l, c], rng.normal_vec(l * c, 1.0)));
        TokenGrid { cls, patch }
    }

    #[test]
    fn constant_pose_trajectory_has_zero_deltas_identical_rows() {
        let traj = vec![Pose { x: 5.0, y: 7.0, theta: 1.2 }; 6];
        let f: Array<f64> = encode_trajectory_features(&traj, 64);
        assert_eq!(f.shape, vec![6, 7]);
        let first: Vec<f64> = (0..7).map(|j| f.rc(0, j)).collect();
        for t in 0..6 {
            for j in 0..7 {
                assert_eq!(f.rc(t, j), first[j]);
            }
            assert_eq!(f.rc(t, 4), 0.0);
            assert_eq!(f.rc(t, 5), 0.0);
            assert_eq!(f.rc(t, 6), 0.0);
        }
    }

    #[test]
    fn rigid_translation_changes_only_absolute_features() {
        let traj: Vec<Pose> =
            (0..5).map(|t| Pose { x: 3.0 * t as f64, y: t as f64, theta: 0.2 }).collect();
        let shifted: Vec<Pose> =
            traj.iter().map(|p| Pose { x: p.x + 10.0, y: p.y + 4.0, theta: p.theta }).collect();
        let a: Array<f64> = encode_trajectory_features(&traj, 64);
        let c: Array<f64> = encode_trajectory_features(&shifted, 64);
        for t in 0..5 {
            // heading and delta slices identical
            for j in 2..7 {
                assert!((a.rc(t, j) - c.rc(t, j)).abs() < 1e-12);
            }
            // absolute position differs
            if t == 0 {
                assert!((a.rc(t, 0) - c.rc(t, 0)).abs() > 1e-6);
            }
        }
    }

    #[test]
    fn encode_trajectory_output_is_t_by_c() {
        let (params, ttm) = setup(FuseMode::Ide);
        let traj: Vec<Pose> = (0..4).map(|t| Pose { x: t as f64, y: 0.0, theta: 0.0 }).collect();
        let mut b = Binding::new(&params);
        let f = ttm.encode_trajectory(&mut b, &traj, 64);
        assert_eq!(b.tape.shape(f), &[4, 8]);
    }

    #[test]
    fn zero_motion_features_and_zero_values_leave_tokens_unchanged() {
        let (mut params, ttm) = setup(FuseMode::Ide);
        *params.get_mut("ttm.fuse.wv") = Array::zeros(vec![8, 8]);
        let mut rng = Rng::from_seed(71);
        let mut b = Binding::new(&params);
        let y = grid(&mut b, &mut rng, 4, 8);
        let zero_feats = b.tape.constant(Array::zeros(vec![3, 8]));
        let fused = ttm.temporal_fuse(&mut b, &y, zero_feats);
        let expect = {
            let t = y.tokens(&mut b);
            b.tape.data(t).data.clone()
        };
        assert_eq!(fused.len(), 3);
        for f in fused {
            assert_eq!(b.tape.data(f).data, expect, "residual chain must pass tokens through");
        }
    }

    #[test]
    fn single_frame_trajectory_degenerates_gracefully() {
        let (params, ttm) = setup(FuseMode::Ide);
        let mut rng = Rng::from_seed(72);
        let mut b = Binding::new(&params);
        let y = grid(&mut b, &mut rng, 4, 8);
        let traj = vec![Pose { x: 1.0, y: 2.0, theta: 0.5 }];
        let tf = ttm.encode_trajectory(&mut b, &traj, 16);
        let fused = ttm.temporal_fuse(&mut b, &y, tf);
        assert_eq!(fused.len(), 1);
        let r_exo = ttm.exo_update(&mut b, &y, &fused);
        assert_eq!(r_exo.len(), 1);
        assert_eq!(b.tape.shape(r_exo[0]), &[5, 8]);
    }

    #[test]
    fn exo_update_zero_values_reduce_to_exo_tokens() {
        let (mut params, ttm) = setup(FuseMode::Ide);
        *params.get_mut("ttm.exo_ca.wv") = Array::zeros(vec![8, 8]);
        ttm.exo_tx.as_ref().map(|_| ());
        // zero the transformer value/MLP weights too
        *params.get_mut("ttm.exo_tx.wv") = Array::zeros(vec![8, 8]);
        *params.get_mut("ttm.exo_tx.mlp.w2") = Array::zeros(vec![16, 8]);
        let mut rng = Rng::from_seed(73);
        let mut b = Binding::new(&params);
        let y_exo = grid(&mut b, &mut rng, 4, 8);
        let r_ego: Vec<Var> = (0..3)
            .map(|_| b.tape.constant(Array::from_vec(vec![5, 8], rng.normal_vec(40, 1.0))))
            .collect();
        let r_exo = ttm.exo_update(&mut b, &y_exo, &r_ego);
        let expect = {
            let t = y_exo.tokens(&mut b);
            b.tape.data(t).data.clone()
        };
        for r in r_exo {
            assert_eq!(b.tape.data(r).data, expect);
        }
    }

    #[test]
    fn exo_update_is_a_per_timestep_map_permutation_equivariant() {
        let (params, ttm) = setup(FuseMode::Ide);
        let mut rng = Rng::from_seed(74);
        let mut b = Binding::new(&params);
        let y_exo = grid(&mut b, &mut rng, 4, 8);
        let r_ego: Vec<Var> = (0..4)
            .map(|_| b.tape.constant(Array::from_vec(vec![5, 8], rng.normal_vec(40, 1.0))))
            .collect();
        let perm = [2usize, 0, 3, 1];
        let r_perm: Vec<Var> = perm.iter().map(|&i| r_ego[i]).collect();
        let out = ttm.exo_update(&mut b, &y_exo, &r_ego);
        let out_perm = ttm.exo_update(&mut b, &y_exo, &r_perm);
        for (t, &src) in perm.iter().enumerate() {
            assert_eq!(
                b.tape.data(out_perm[t]).data,
                b.tape.data(out[src]).data,
                "permuting inputs must permute outputs identically"
            );
        }
    }

    #[test]
    fn temporal_fuse_keys_are_order_invariant_queries_select_frames() {
        // permuting the motion features permutes r_ego because only the
        // query side depends on the frame index
        let (params, ttm) = setup(FuseMode::Ide);
        let mut rng = Rng::from_seed(75);
        let mut b = Binding::new(&params);
        let y = grid(&mut b, &mut rng, 4, 8);
        let feats = Array::from_vec(vec![3, 8], rng.normal_vec(24, 1.0));
        let perm = [1usize, 2, 0];
        let permuted = Array::from_vec(
            vec![3, 8],
            perm.iter().flat_map(|&i| feats.data[i * 8..(i + 1) * 8].to_vec()).collect(),
        );
        let fv = b.tape.constant(feats);
        let pv = b.tape.constant(permuted);
        let a = ttm.temporal_fuse(&mut b, &y, fv);
        let p = ttm.temporal_fuse(&mut b, &y, pv);
        for (t, &src) in perm.iter().enumerate() {
            let got = b.tape.data(p[t]).data.clone();
            let want = b.tape.data(a[src]).data.clone();
            for (g, w) in got.iter().zip(want.iter()) {
                assert!((g - w).abs() < 1e-12, "temporal fuse must be key-order invariant");
            }
        }
    }
}
