use crate::conditioning::Condition;
use crate::nn::attention::{attend, AttentionParams};
use crate::nn::blocks::{Conv2dLayer, Mlp, ResBlock};
use crate::tensor::{Array, Binding, ParamStore, Real, Var};

/// Architecture of the per-frame x0-prediction U-Net: two down / two up
/// levels with residual blocks, sinusoidal time embedding added per
/// level, and bottleneck spatial, temporal, and condition
/// cross-attention. The first-frame latent z is concatenated to the
/// input channels.
#[derive(Clone, Debug)]
pub struct DenoiserConfig {
    pub latent: usize,
    pub c_lat: usize,
    pub frames: usize,
    pub cond_width: usize,
    pub channels: [usize; 3],
    pub heads: usize,
    pub temb_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent: 16,
            c_lat: 16,
            frames: 8,
            cond_width: 64,
            channels: [24, 32, 48],
            heads: 4,
            temb_dim: 32,
        }
    }
}

impl DenoiserConfig {
    pub fn toy() -> Self {
        DenoiserConfig {
            latent: 4,
            c_lat: 2,
            frames: 2,
            cond_width: 8,
            channels: [4, 6, 8],
            heads: 2,
            temb_dim: 8,
        }
    }
}

/// Sinusoidal embedding of a diffusion step index.
pub fn sinusoidal_embedding<T: Real>(pos: f64, dim: usize) -> Array<T> {
    assert_eq!(dim % 2, 0, "embedding dim must be even");
    let mut data = vec![T::ZERO; dim];
    for i in 0..dim / 2 {
        let freq = (10000f64).powf(-2.0 * i as f64 / dim as f64);
        data[2 * i] = T::from_f64((pos * freq).sin());
        data[2 * i + 1] = T::from_f64((pos * freq).cos());
    }
    Array::from_vec(vec![1, dim], data)
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    stem: Conv2dLayer,
    res1: ResBlock,
    down1: Conv2dLayer,
    res2: ResBlock,
    down2: Conv2dLayer,
    res3: ResBlock,
    attn_sp: AttentionParams,
    attn_t: AttentionParams,
    attn_x: AttentionParams,
    res4: ResBlock,
    up1: Conv2dLayer,
    res5: ResBlock,
    up2: Conv2dLayer,
    res6: ResBlock,
    head: Conv2dLayer,
    temb_mlp: Mlp,
}

impl Denoiser {
    pub fn init<T: Real>(params: &mut ParamStore<T>, cfg: &DenoiserConfig, seed: u64) -> Self {
        let [c0, c1, c2] = cfg.channels;
        assert_eq!(c2 % cfg.heads, 0, "bottleneck width {c2} not divisible by heads");
        let cin = 3 + cfg.c_lat;
        let model = Denoiser {
            cfg: cfg.clone(),
            stem: Conv2dLayer::init(params, "dm.stem", cin, c0, 3, 1, 1, seed),
            res1: ResBlock::init(params, "dm.res1", c0, seed),
            down1: Conv2dLayer::init(params, "dm.down1", c0, c1, 3, 2, 1, seed),
            res2: ResBlock::init(params, "dm.res2", c1, seed),
            down2: Conv2dLayer::init(params, "dm.down2", c1, c2, 3, 2, 1, seed),
            res3: ResBlock::init(params, "dm.res3", c2, seed),
            attn_sp: AttentionParams::init(params, "dm.attn_sp", c2, cfg.heads, seed),
            attn_t: AttentionParams::init(params, "dm.attn_t", c2, cfg.heads, seed),
            attn_x: AttentionParams::init(params, "dm.attn_x", c2, cfg.heads, seed),
            res4: ResBlock::init(params, "dm.res4", c2, seed),
            up1: Conv2dLayer::init(params, "dm.up1", c2 + c1, c1, 3, 1, 1, seed),
            res5: ResBlock::init(params, "dm.res5", c1, seed),
            up2: Conv2dLayer::init(params, "dm.up2", c1 + c0, c0, 3, 1, 1, seed),
            res6: ResBlock::init(params, "dm.res6", c0, seed),
            head: Conv2dLayer::init(params, "dm.head", c0, 3, 3, 1, 1, seed),
            temb_mlp: Mlp::init(params, "dm.temb.mlp", cfg.temb_dim, c2, c2, seed),
        };
        // zero-init the head so the first predictions are x0 = 0 and
        // the loss starts at mean(x0^2) instead of an init transient
        let head_w = params.get_mut("dm.head.w");
        *head_w = crate::tensor::Array::zeros(head_w.shape.clone());
        params.init_normal("dm.frame_embed", vec![cfg.frames, c2], 0.02, seed);
        params.init_he("dm.cond_proj.w", vec![cfg.cond_width, c2], cfg.cond_width, seed);
        params.init_zeros("dm.cond_proj.b", vec![c2]);
        for (lvl, ch) in [c0, c1, c2, c2, c1, c0].into_iter().enumerate() {
            params.init_he(&format!("dm.temb.lvl{}.w", lvl + 1), vec![c2, ch], c2, seed);
            params.init_zeros(&format!("dm.temb.lvl{}.b", lvl + 1), vec![ch]);
        }
        model
    }

    pub fn restore(cfg: &DenoiserConfig) -> Self {
        let mut scratch: ParamStore<f32> = ParamStore::new();
        Denoiser::init(&mut scratch, cfg, 0)
    }

    fn temb_bias<T: Real>(&self, b: &mut Binding<T>, temb: Var, lvl: usize, ch: usize) -> Var {
        let w = b.param(&format!("dm.temb.lvl{lvl}.w"));
        let bias = b.param(&format!("dm.temb.lvl{lvl}.b"));
        let x = b.tape.linear(temb, w, bias);
        b.tape.reshape(x, vec![ch])
    }

    /// [c,h,w] -> [h*w, c] token matrix.
    fn to_tokens<T: Real>(b: &mut Binding<T>, x: Var) -> Var {
        let s = b.tape.shape(x).to_vec();
        let flat = b.tape.reshape(x, vec![s[0], s[1] * s[2]]);
        b.tape.transpose(flat)
    }

    fn from_tokens<T: Real>(b: &mut Binding<T>, tokens: Var, c: usize, h: usize, w: usize) -> Var {
        let t = b.tape.transpose(tokens);
        b.tape.reshape(t, vec![c, h, w])
    }

    /// Predict x0 for every frame of the noisy sequence.
    pub fn forward<T: Real>(
        &self,
        b: &mut Binding<T>,
        x_frames: &[Var],
        step: usize,
        cond: &Condition,
    ) -> Vec<Var> {
        let cfg = &self.cfg;
        let t_frames = x_frames.len();
        assert_eq!(t_frames, cfg.frames, "frame count mismatch");
        assert_eq!(cond.tokens_per_frame.len(), t_frames, "condition frames mismatch");
        let [c0, c1, c2] = cfg.channels;
        let hb = cfg.latent / 4;
        let p_tokens = hb * hb;

        let sin = sinusoidal_embedding::<T>(step as f64, cfg.temb_dim);
        let sin_v = b.tape.constant(sin);
        let temb = self.temb_mlp.forward(b, sin_v);
        let biases: Vec<Var> = [c0, c1, c2, c2, c1, c0]
            .into_iter()
            .enumerate()
            .map(|(i, ch)| self.temb_bias(b, temb, i + 1, ch))
            .collect();

        // down path per frame
        let mut skips0 = Vec::with_capacity(t_frames);
        let mut skips1 = Vec::with_capacity(t_frames);
        let mut bottleneck_tokens = Vec::with_capacity(t_frames);
        for &x in x_frames {
            assert_eq!(b.tape.shape(x), &[3, cfg.latent, cfg.latent], "x_n frame shape");
            let xin = b.tape.concat0(x, cond.z);
            let h0 = self.stem.forward(b, xin);
            let s0 = self.res1.forward(b, h0, Some(biases[0]));
            let h1 = self.down1.forward(b, s0);
            let s1 = self.res2.forward(b, h1, Some(biases[1]));
            let h2 = self.down2.forward(b, s1);
            let bn = self.res3.forward(b, h2, Some(biases[2]));
            // spatial self-attention over bottleneck tokens
            let tokens = Self::to_tokens(b, bn);
            let sp = self.attn_sp.attend(b, tokens, tokens);
            let tokens = b.tape.add(tokens, sp);
            skips0.push(s0);
            skips1.push(s1);
            bottleneck_tokens.push(tokens);
        }

        // temporal self-attention across frames, one call per position
        let frame_embed = b.param("dm.frame_embed");
        let mut all = bottleneck_tokens[0];
        for &t in &bottleneck_tokens[1..] {
            all = b.tape.concat0(all, t);
        }
        let mut per_position: Vec<Var> = Vec::with_capacity(p_tokens);
        for p in 0..p_tokens {
            let idx: Vec<usize> = (0..t_frames).map(|t| t * p_tokens + p).collect();
            let rows = b.tape.gather_rows(all, idx);
            let emb = b.tape.add(rows, frame_embed);
            let at = attend_self(b, &self.attn_t, emb);
            per_position.push(b.tape.add(rows, at));
        }
        let mut stacked = per_position[0];
        for &p in &per_position[1..] {
            stacked = b.tape.concat0(stacked, p);
        }

        // cross-attention to the condition tokens, then the up path
        let wc = b.param("dm.cond_proj.w");
        let bc = b.param("dm.cond_proj.b");
        let mut out = Vec::with_capacity(t_frames);
        for t in 0..t_frames {
            let idx: Vec<usize> = (0..p_tokens).map(|p| p * t_frames + t).collect();
            let tokens = b.tape.gather_rows(stacked, idx);
            let cproj = b.tape.linear(cond.tokens_per_frame[t], wc, bc);
            let cx = self.attn_x.attend(b, tokens, cproj);
            let tokens = b.tape.add(tokens, cx);
            let bn = Self::from_tokens(b, tokens, c2, hb, hb);
            let bn = self.res4.forward(b, bn, Some(biases[3]));
            let u1 = b.tape.upsample2x(bn);
            let cat1 = b.tape.concat0(u1, skips1[t]);
            let u1 = self.up1.forward(b, cat1);
            let u1 = b.tape.relu(u1);
            let u1 = self.res5.forward(b, u1, Some(biases[4]));
            let u2 = b.tape.upsample2x(u1);
            let cat2 = b.tape.concat0(u2, skips0[t]);
            let u2 = self.up2.forward(b, cat2);
            let u2 = b.tape.relu(u2);
            let u2 = self.res6.forward(b, u2, Some(biases[5]));
            out.push(self.head.forward(b, u2));
        }
        out
    }
}

fn attend_self<T: Real>(b: &mut Binding<T>, attn: &AttentionParams, tokens: Var) -> Var {
    let wq = b.param(&format!("{}.wq", attn.prefix));
    let wk = b.param(&format!("{}.wk", attn.prefix));
    let wv = b.param(&format!("{}.wv", attn.prefix));
    let wo = b.param(&format!("{}.wo", attn.prefix));
    attend(&mut b.tape, tokens, tokens, wq, wk, wv, wo, attn.heads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn sinusoidal_embedding_is_bounded_and_distinct() {
        let a: Array<f64> = sinusoidal_embedding(3.0, 16);
        let b: Array<f64> = sinusoidal_embedding(4.0, 16);
        assert!(a.data.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a.data, b.data);
    }

    #[test]
    fn forward_preserves_frame_shapes() {
        let cfg = DenoiserConfig::toy();
        let mut params: ParamStore<f32> = ParamStore::new();
        let dn = Denoiser::init(&mut params, &cfg, 7);
        let mut rng = Rng::from_seed(8);
        let mut b = Binding::new(&params);
        let frames: Vec<Var> = (0..cfg.frames)
            .map(|_| {
                b.tape.constant(Array::from_vec(
                    vec![3, cfg.latent, cfg.latent],
                    rng.normal_vec(3 * cfg.latent * cfg.latent, 1.0),
                ))
            })
            .collect();
        let z = Array::from_vec(
            vec![cfg.c_lat, cfg.latent, cfg.latent],
            rng.normal_vec(cfg.c_lat * cfg.latent * cfg.latent, 1.0),
        );
        let zv = b.tape.constant(z);
        let tokens: Vec<Var> = (0..cfg.frames)
            .map(|_| {
                b.tape
                    .constant(Array::from_vec(vec![5, cfg.cond_width], rng.normal_vec(5 * cfg.cond_width, 1.0)))
            })
            .collect();
        let cond = Condition { tokens_per_frame: tokens, z: zv, align_cls: None };
        let out = dn.forward(&mut b, &frames, 10, &cond);
        assert_eq!(out.len(), cfg.frames);
        for o in out {
            assert_eq!(b.tape.shape(o), &[3, cfg.latent, cfg.latent]);
            assert!(b.tape.data(o).all_finite());
        }
    }
}
