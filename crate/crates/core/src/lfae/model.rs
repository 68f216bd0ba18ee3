use crate::nn::blocks::{Conv2dLayer, ResBlock};
use crate::tensor::{Binding, ParamStore, Real, Var};

/// Architecture hyperparameters of the latent flow autoencoder. The
/// latent grid is always size/4 on a side.
#[derive(Clone, Debug)]
pub struct LfaeConfig {
    pub size: usize,
    pub c_lat: usize,
    /// encoder widths after the two stride-2 stages
    pub enc_channels: [usize; 2],
    /// flow estimator widths
    pub flow_channels: [usize; 2],
    /// tanh output scale of the flow head; 1.0 spans the whole image in
    /// normalized coordinates
    pub flow_scale: f64,
}

impl Default for LfaeConfig {
    fn default() -> Self {
        LfaeConfig {
            size: 64,
            c_lat: 16,
            enc_channels: [16, 32],
            flow_channels: [16, 24],
            flow_scale: 1.0,
        }
    }
}

impl LfaeConfig {
    pub fn latent_side(&self) -> usize {
        self.size / 4
    }

    /// A tiny configuration for 64-bit finite-difference checks.
    pub fn toy() -> Self {
        LfaeConfig {
            size: 8,
            c_lat: 4,
            enc_channels: [4, 6],
            flow_channels: [4, 6],
            flow_scale: 1.0,
        }
    }
}

/// Encoder, flow/occlusion estimator, and decoder over named tensors.
#[derive(Clone, Debug)]
pub struct LfaeModel {
    pub cfg: LfaeConfig,
    enc_down1: Conv2dLayer,
    enc_rb1: ResBlock,
    enc_down2: Conv2dLayer,
    enc_rb2: ResBlock,
    enc_proj: Conv2dLayer,
    dec_proj: Conv2dLayer,
    dec_rb0: ResBlock,
    dec_conv1: Conv2dLayer,
    dec_rb1: ResBlock,
    dec_conv2: Conv2dLayer,
    dec_out: Conv2dLayer,
    flow_c1: Conv2dLayer,
    flow_c2: Conv2dLayer,
    flow_rb: ResBlock,
    flow_head: Conv2dLayer,
    occ_head: Conv2dLayer,
}

impl LfaeModel {
    pub fn init<T: Real>(params: &mut ParamStore<T>, cfg: &LfaeConfig, seed: u64) -> Self {
        let [c1, c2] = cfg.enc_channels;
        let [f1, f2] = cfg.flow_channels;
        let cl = cfg.c_lat;
        let half = c1.div_ceil(2);
        LfaeModel {
            cfg: cfg.clone(),
            enc_down1: Conv2dLayer::init(params, "lfae.enc.down1", 3, c1, 3, 2, 1, seed),
            enc_rb1: ResBlock::init(params, "lfae.enc.rb1", c1, seed),
            enc_down2: Conv2dLayer::init(params, "lfae.enc.down2", c1, c2, 3, 2, 1, seed),
            enc_rb2: ResBlock::init(params, "lfae.enc.rb2", c2, seed),
            enc_proj: Conv2dLayer::init(params, "lfae.enc.proj", c2, cl, 1, 1, 0, seed),
            dec_proj: Conv2dLayer::init(params, "lfae.dec.proj", cl, c2, 1, 1, 0, seed),
            dec_rb0: ResBlock::init(params, "lfae.dec.rb0", c2, seed),
            dec_conv1: Conv2dLayer::init(params, "lfae.dec.conv1", c2, c1, 3, 1, 1, seed),
            dec_rb1: ResBlock::init(params, "lfae.dec.rb1", c1, seed),
            dec_conv2: Conv2dLayer::init(params, "lfae.dec.conv2", c1, half, 3, 1, 1, seed),
            dec_out: Conv2dLayer::init(params, "lfae.dec.out", half, 3, 3, 1, 1, seed),
            flow_c1: Conv2dLayer::init(params, "lfae.flow.c1", 6, f1, 3, 2, 1, seed),
            flow_c2: Conv2dLayer::init(params, "lfae.flow.c2", f1, f2, 3, 2, 1, seed),
            flow_rb: ResBlock::init(params, "lfae.flow.rb", f2, seed),
            flow_head: Conv2dLayer::init(params, "lfae.flow.head", f2, 2, 3, 1, 1, seed),
            occ_head: Conv2dLayer::init(params, "lfae.occ.head", f2, 1, 3, 1, 1, seed),
        }
    }

    /// Frame [3,S,S] -> latent [C_lat, S/4, S/4]: two stride-2 residual
    /// stages, then a 1x1 projection.
    pub fn encode<T: Real>(&self, b: &mut Binding<T>, frame: Var) -> Var {
        let s = self.cfg.size;
        assert_eq!(
            b.tape.shape(frame),
            &[3, s, s],
            "encode expects a [3,{s},{s}] frame"
        );
        let h = self.enc_down1.forward(b, frame);
        let h = b.tape.relu(h);
        let h = self.enc_rb1.forward(b, h, None);
        let h = self.enc_down2.forward(b, h);
        let h = b.tape.relu(h);
        let h = self.enc_rb2.forward(b, h, None);
        self.enc_proj.forward(b, h)
    }

    /// Latent [C_lat,h,w] -> frame [3,S,S] in [0,1]: mirror of the
    /// encoder with two nearest-neighbour 2x upsampling stages and a
    /// sigmoid output.
    pub fn decode<T: Real>(&self, b: &mut Binding<T>, z: Var) -> Var {
        let hs = self.cfg.latent_side();
        assert_eq!(
            b.tape.shape(z),
            &[self.cfg.c_lat, hs, hs],
            "decode expects a [{},{hs},{hs}] latent",
            self.cfg.c_lat
        );
        let h = self.dec_proj.forward(b, z);
        let h = b.tape.relu(h);
        let h = self.dec_rb0.forward(b, h, None);
        let h = b.tape.upsample2x(h);
        let h = self.dec_conv1.forward(b, h);
        let h = b.tape.relu(h);
        let h = self.dec_rb1.forward(b, h, None);
        let h = b.tape.upsample2x(h);
        let h = self.dec_conv2.forward(b, h);
        let h = b.tape.relu(h);
        let h = self.dec_out.forward(b, h);
        b.tape.sigmoid(h)
    }

    /// Backward flow and occlusion from frame j to frame i at latent
    /// resolution: flow through tanh x flow_scale, occlusion through a
    /// sigmoid.
    pub fn estimate_flow<T: Real>(&self, b: &mut Binding<T>, frame_i: Var, frame_j: Var) -> (Var, Var) {
        let s = self.cfg.size;
        assert_eq!(b.tape.shape(frame_i), &[3, s, s], "estimate_flow frame_i shape");
        assert_eq!(b.tape.shape(frame_j), &[3, s, s], "estimate_flow frame_j shape");
        let x = b.tape.concat0(frame_i, frame_j);
        let h = self.flow_c1.forward(b, x);
        let h = b.tape.relu(h);
        let h = self.flow_c2.forward(b, h);
        let h = b.tape.relu(h);
        let h = self.flow_rb.forward(b, h, None);
        let f = self.flow_head.forward(b, h);
        let f = b.tape.tanh(f);
        let f = b.tape.scale(f, self.cfg.flow_scale);
        let m = self.occ_head.forward(b, h);
        let m = b.tape.sigmoid(m);
        (f, m)
    }

    /// z_tilde = m (x) W(z, f)
    pub fn warp<T: Real>(&self, b: &mut Binding<T>, z: Var, flow: Var, occ: Var) -> Var {
        let warped = b.tape.grid_sample(z, flow);
        b.tape.mul_channel_broadcast(warped, occ)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Array, Rng, Tape};

    fn toy_setup() -> (ParamStore<f64>, LfaeModel) {
        let mut params: ParamStore<f64> = ParamStore::new();
        let model = LfaeModel::init(&mut params, &LfaeConfig::toy(), 3);
        (params, model)
    }

    #[test]
    fn encode_decode_shapes_and_ranges() {
        let mut params: ParamStore<f32> = ParamStore::new();
        let cfg = LfaeConfig::default();
        let model = LfaeModel::init(&mut params, &cfg, 1);
        let mut rng = Rng::from_seed(2);
        let frame = Array::from_vec(vec![3, 64, 64], rng.uniform_vec(3 * 64 * 64, 0.0, 1.0));
        let mut b = Binding::new(&params);
        let fv = b.tape.constant(frame);
        let z = model.encode(&mut b, fv);
        assert_eq!(b.tape.shape(z), &[16, 16, 16]);
        let out = model.decode(&mut b, z);
        assert_eq!(b.tape.shape(out), &[3, 64, 64]);
        assert!(b.tape.data(out).data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn identical_frames_identical_latents_zero_frame_finite() {
        let mut params: ParamStore<f32> = ParamStore::new();
        let cfg = LfaeConfig::default();
        let model = LfaeModel::init(&mut params, &cfg, 1);
        let mut rng = Rng::from_seed(5);
        let frame = Array::from_vec(vec![3, 64, 64], rng.uniform_vec(3 * 64 * 64, 0.0, 1.0));
        let mut b = Binding::new(&params);
        let f1 = b.tape.constant(frame.clone());
        let f2 = b.tape.constant(frame);
        let z1 = model.encode(&mut b, f1);
        let z2 = model.encode(&mut b, f2);
        assert_eq!(b.tape.data(z1).data, b.tape.data(z2).data);

        let zero = b.tape.constant(Array::zeros(vec![3, 64, 64]));
        let z0 = model.encode(&mut b, zero);
        assert!(b.tape.data(z0).all_finite());
    }

    #[test]
    fn flow_field_shapes_and_occlusion_range() {
        let mut params: ParamStore<f32> = ParamStore::new();
        let cfg = LfaeConfig::default();
        let model = LfaeModel::init(&mut params, &cfg, 1);
        let mut rng = Rng::from_seed(6);
        let fi = Array::from_vec(vec![3, 64, 64], rng.uniform_vec(3 * 64 * 64, 0.0, 1.0));
        let fj = Array::from_vec(vec![3, 64, 64], rng.uniform_vec(3 * 64 * 64, 0.0, 1.0));
        let mut b = Binding::new(&params);
        let fiv = b.tape.constant(fi);
        let fjv = b.tape.constant(fj);
        let (f, m) = model.estimate_flow(&mut b, fiv, fjv);
        assert_eq!(b.tape.shape(f), &[2, 16, 16]);
        assert_eq!(b.tape.shape(m), &[1, 16, 16]);
        assert!(b.tape.data(m).data.iter().all(|&v| v > 0.0 && v < 1.0), "sigmoid keeps m in (0,1)");
        assert!(b.tape.data(f).data.iter().all(|&v| v.abs() <= 1.0), "tanh bounds flow");
    }

    #[test]
    fn warp_identity_and_annihilation() {
        let (params, model) = toy_setup();
        let mut rng = Rng::from_seed(7);
        let mut b = Binding::new(&params);
        let z = b.tape.constant(Array::from_vec(vec![4, 2, 2], rng.normal_vec(16, 1.0)));
        let zero_flow = b.tape.constant(Array::zeros(vec![2, 2, 2]));
        let ones = b.tape.constant(Array::full(vec![1, 2, 2], 1.0));
        let out = model.warp(&mut b, z, zero_flow, ones);
        assert_eq!(b.tape.data(out).data, b.tape.data(z).data, "f=0, m=1 must be the identity");

        let zeros = b.tape.constant(Array::zeros(vec![1, 2, 2]));
        let out = model.warp(&mut b, z, zero_flow, zeros);
        assert!(b.tape.data(out).data.iter().all(|&v| v == 0.0), "m=0 must annihilate");
    }

    #[test]
    fn warp_one_pixel_shift_matches_index_oracle() {
        let (params, model) = toy_setup();
        let mut t: Tape<f64> = Tape::new();
        let _ = &model;
        let mut rng = Rng::from_seed(8);
        let (c, h, w) = (4usize, 4usize, 4usize);
        let z = Array::from_vec(vec![c, h, w], rng.normal_vec(c * h * w, 1.0));
        let mut flow = vec![0.0f64; 2 * h * w];
        for v in flow[..h * w].iter_mut() {
            *v = 2.0 / (w as f64 - 1.0);
        }
        let zv = t.constant(z.clone());
        let fv = t.constant(Array::from_vec(vec![2, h, w], flow));
        let mv = t.constant(Array::full(vec![1, h, w], 1.0));
        let mut b = Binding::new(&params);
        std::mem::swap(&mut b.tape, &mut t);
        let out = model.warp(&mut b, zv, fv, mv);
        let got = b.tape.data(out);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w - 1 {
                    assert!((got.chw(ch, y, x) - z.chw(ch, y, x + 1)).abs() < 1e-12);
                }
            }
        }
    }
}
