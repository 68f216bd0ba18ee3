use super::attention::attend;
use crate::tensor::{Binding, ParamStore, Real, Tape, Var};

/// Conv + channel bias.
pub fn conv_layer<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
    let c = tape.conv2d(x, w, stride, pad);
    tape.add_channel_bias(c, b)
}

/// Residual 3x3 conv block, optionally injecting a per-channel bias
/// (the diffusion time embedding) after the first conv.
pub fn res_block<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    channel_bias: Option<Var>,
) -> Var {
    let mut h = conv_layer(tape, x, w1, b1, 1, 1);
    if let Some(cb) = channel_bias {
        h = tape.add_channel_bias(h, cb);
    }
    let h = tape.relu(h);
    let h = conv_layer(tape, h, w2, b2, 1, 1);
    let s = tape.add(x, h);
    tape.relu(s)
}

/// Var-level inputs of one pre-norm transformer layer.
pub struct TransformerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub heads: usize,
}

/// Pre-norm self-attention + 2-layer MLP with residuals:
/// x + MHSA(LN(x)), then + MLP(LN(.)).
pub fn transformer_layer<T: Real>(tape: &mut Tape<T>, x: Var, v: &TransformerVars) -> Var {
    let h = tape.layer_norm(x, v.ln1_gamma, v.ln1_beta, 1e-5);
    let a = attend(tape, h, h, v.wq, v.wk, v.wv, v.wo, v.heads);
    let x1 = tape.add(x, a);
    let h2 = tape.layer_norm(x1, v.ln2_gamma, v.ln2_beta, 1e-5);
    let m = tape.linear(h2, v.mlp_w1, v.mlp_b1);
    let m = tape.relu(m);
    let m = tape.linear(m, v.mlp_w2, v.mlp_b2);
    tape.add(x1, m)
}

/// Named conv layer.
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub prefix: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Real>(
        params: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        seed: u64,
    ) -> Self {
        params.init_he(&format!("{prefix}.w"), vec![cout, cin, k, k], cin * k * k, seed);
        params.init_zeros(&format!("{prefix}.b"), vec![cout]);
        Conv2dLayer { prefix: prefix.to_string(), stride, pad }
    }

    pub fn forward<T: Real>(&self, b: &mut Binding<T>, x: Var) -> Var {
        let w = b.param(&format!("{}.w", self.prefix));
        let bias = b.param(&format!("{}.b", self.prefix));
        conv_layer(&mut b.tape, x, w, bias, self.stride, self.pad)
    }
}

/// Named residual block (two 3x3 convs at constant width).
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub prefix: String,
}

impl ResBlock {
    pub fn init<T: Real>(params: &mut ParamStore<T>, prefix: &str, channels: usize, seed: u64) -> Self {
        params.init_he(&format!("{prefix}.w1"), vec![channels, channels, 3, 3], channels * 9, seed);
        params.init_zeros(&format!("{prefix}.b1"), vec![channels]);
        params.init_he(&format!("{prefix}.w2"), vec![channels, channels, 3, 3], channels * 9, seed);
        params.init_zeros(&format!("{prefix}.b2"), vec![channels]);
        ResBlock { prefix: prefix.to_string() }
    }

    pub fn forward<T: Real>(&self, b: &mut Binding<T>, x: Var, channel_bias: Option<Var>) -> Var {
        let w1 = b.param(&format!("{}.w1", self.prefix));
        let b1 = b.param(&format!("{}.b1", self.prefix));
        let w2 = b.param(&format!("{}.w2", self.prefix));
        let b2 = b.param(&format!("{}.b2", self.prefix));
        res_block(&mut b.tape, x, w1, b1, w2, b2, channel_bias)
    }
}

/// Named 2-layer MLP with relu.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub prefix: String,
}

impl Mlp {
    pub fn init<T: Real>(
        params: &mut ParamStore<T>,
        prefix: &str,
        din: usize,
        hidden: usize,
        dout: usize,
        seed: u64,
    ) -> Self {
        params.init_he(&format!("{prefix}.w1"), vec![din, hidden], din, seed);
        params.init_zeros(&format!("{prefix}.b1"), vec![hidden]);
        params.init_he(&format!("{prefix}.w2"), vec![hidden, dout], hidden, seed);
        params.init_zeros(&format!("{prefix}.b2"), vec![dout]);
        Mlp { prefix: prefix.to_string() }
    }

    pub fn forward<T: Real>(&self, b: &mut Binding<T>, x: Var) -> Var {
        let w1 = b.param(&format!("{}.w1", self.prefix));
        let b1 = b.param(&format!("{}.b1", self.prefix));
        let w2 = b.param(&format!("{}.w2", self.prefix));
        let b2 = b.param(&format!("{}.b2", self.prefix));
        let h = b.tape.linear(x, w1, b1);
        let h = b.tape.relu(h);
        b.tape.linear(h, w2, b2)
    }
}

/// Named pre-norm transformer layer.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub prefix: String,
    pub heads: usize,
}

impl TransformerLayer {
    pub fn init<T: Real>(
        params: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        heads: usize,
        seed: u64,
    ) -> Self {
        let std = 1.0 / (width as f64).sqrt();
        for proj in ["wq", "wk", "wv", "wo"] {
            params.init_normal(&format!("{prefix}.{proj}"), vec![width, width], std, seed);
        }
        params.insert(&format!("{prefix}.ln1.g"), crate::tensor::Array::full(vec![width], T::ONE));
        params.init_zeros(&format!("{prefix}.ln1.b"), vec![width]);
        params.insert(&format!("{prefix}.ln2.g"), crate::tensor::Array::full(vec![width], T::ONE));
        params.init_zeros(&format!("{prefix}.ln2.b"), vec![width]);
        let hidden = 2 * width;
        params.init_he(&format!("{prefix}.mlp.w1"), vec![width, hidden], width, seed);
        params.init_zeros(&format!("{prefix}.mlp.b1"), vec![hidden]);
        params.init_he(&format!("{prefix}.mlp.w2"), vec![hidden, width], hidden, seed);
        params.init_zeros(&format!("{prefix}.mlp.b2"), vec![width]);
        TransformerLayer { prefix: prefix.to_string(), heads }
    }

    pub fn forward<T: Real>(&self, b: &mut Binding<T>, x: Var) -> Var {
        let p = &self.prefix;
        let vars = TransformerVars {
            wq: b.param(&format!("{p}.wq")),
            wk: b.param(&format!("{p}.wk")),
            wv: b.param(&format!("{p}.wv")),
            wo: b.param(&format!("{p}.wo")),
            ln1_gamma: b.param(&format!("{p}.ln1.g")),
            ln1_beta: b.param(&format!("{p}.ln1.b")),
            mlp_w1: b.param(&format!("{p}.mlp.w1")),
            mlp_b1: b.param(&format!("{p}.mlp.b1")),
            mlp_w2: b.param(&format!("{p}.mlp.w2")),
            mlp_b2: b.param(&format!("{p}.mlp.b2")),
            ln2_gamma: b.param(&format!("{p}.ln2.g")),
            ln2_beta: b.param(&format!("{p}.ln2.b")),
            heads: self.heads,
        };
        transformer_layer(&mut b.tape, x, &vars)
    }

    /// Zero the value projection and MLP output layer, making the layer
    /// an exact identity; used by residual-chain tests and ablations.
    pub fn zero_out<T: Real>(&self, params: &mut ParamStore<T>) {
        let p = &self.prefix;
        let wv = params.get_mut(&format!("{p}.wv"));
        *wv = crate::tensor::Array::zeros(wv.shape.clone());
        let w2 = params.get_mut(&format!("{p}.mlp.w2"));
        *w2 = crate::tensor::Array::zeros(w2.shape.clone());
        let b2 = params.get_mut(&format!("{p}.mlp.b2"));
        *b2 = crate::tensor::Array::zeros(b2.shape.clone());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Array, Rng};

    #[test]
    fn transformer_with_zeroed_values_is_identity() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let layer = TransformerLayer::init(&mut store, "tx", 8, 2, 5);
        layer.zero_out(&mut store);
        let mut rng = Rng::from_seed(1);
        let x = Array::from_vec(vec![3, 8], rng.normal_vec(24, 1.0));
        let mut b = Binding::new(&store);
        let xv = b.tape.constant(x.clone());
        let y = layer.forward(&mut b, xv);
        assert_eq!(b.tape.data(y).data, x.data);
    }

    #[test]
    fn res_block_keeps_shape() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let block = ResBlock::init(&mut store, "rb", 4, 9);
        let mut rng = Rng::from_seed(2);
        let x = Array::from_vec(vec![4, 6, 6], rng.normal_vec(4 * 36, 1.0));
        let mut b = Binding::new(&store);
        let xv = b.tape.constant(x);
        let y = block.forward(&mut b, xv, None);
        assert_eq!(b.tape.shape(y), &[4, 6, 6]);
    }
}
