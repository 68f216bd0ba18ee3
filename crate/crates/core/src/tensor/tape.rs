//! Reverse-mode tape over dense tensors.
//!
//! A tape is rebuilt for every training step: parameters are bound as
//! leaves, the forward pass records one node per op, and `backward`
//! replays the record in reverse, accumulating gradients additively
//! into every node that can reach the loss. Callers pull gradients out
//! and drop the tape.

use super::array::Array;
use super::kernels as kn;
use super::real::Real;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    AddRowBroadcast(Var, Var),
    AddChannelBias(Var, Var),
    MulChannelBroadcast(Var, Var),
    Concat0(Var, Var),
    Slice0(Var, usize, usize),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    Upsample2x(Var),
    GridSample { src: Var, flow: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
}

struct Node<T: Real> {
    data: Array<T>,
    grad: Option<Vec<T>>,
    needs: bool,
    op: Op,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    /// Per-pass gradient buffers used during `backward`.
    scratch: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), scratch: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Array<T>, needs: bool, op: Op) -> Var {
        self.nodes.push(Node { data, grad: None, needs, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn leaf(&mut self, data: Array<T>) -> Var {
        self.push(data, true, Op::Leaf)
    }

    /// Non-differentiable leaf (input data, frozen features).
    pub fn constant(&mut self, data: Array<T>) -> Var {
        self.push(data, false, Op::Leaf)
    }

    pub fn data(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].data.shape
    }

    pub fn value(&self, v: Var) -> T {
        self.nodes[v.0].data.item()
    }

    /// Gradient of a node after `backward`; zeros if the node was never
    /// reached.
    pub fn grad(&self, v: Var) -> Vec<T> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => vec![T::ZERO; self.nodes[v.0].data.numel()],
        }
    }

    // ---- elementwise / arithmetic ----

    fn assert_same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "add");
        let data = Array {
            shape: self.shape(a).to_vec(),
            data: self.nodes[a.0]
                .data
                .data
                .iter()
                .zip(self.nodes[b.0].data.data.iter())
                .map(|(&x, &y)| x + y)
                .collect(),
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(data, needs, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "sub");
        let data = Array {
            shape: self.shape(a).to_vec(),
            data: self.nodes[a.0]
                .data
                .data
                .iter()
                .zip(self.nodes[b.0].data.data.iter())
                .map(|(&x, &y)| x - y)
                .collect(),
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(data, needs, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "mul");
        let data = Array {
            shape: self.shape(a).to_vec(),
            data: self.nodes[a.0]
                .data
                .data
                .iter()
                .zip(self.nodes[b.0].data.data.iter())
                .map(|(&x, &y)| x * y)
                .collect(),
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(data, needs, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        let data = self.nodes[a.0].data.map(|x| x * cv);
        let needs = self.needs(a);
        self.push(data, needs, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        let data = self.nodes[a.0].data.map(|x| x + cv);
        let needs = self.needs(a);
        self.push(data, needs, Op::AddScalar(a))
    }

    // ---- matrix ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2, "matmul takes matrices, got {sa:?} and {sb:?}");
        assert_eq!(
            sa[1], sb[0],
            "matmul: inner extents differ, lhs {:?} vs rhs {:?}",
            sa, sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        kn::matmul_nn(&self.nodes[a.0].data.data, &self.nodes[b.0].data.data, m, k, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push(Array::from_vec(vec![m, n], out), needs, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        assert_eq!(s.len(), 2, "transpose takes a matrix, got {s:?}");
        let (r, c) = (s[0], s[1]);
        let src = &self.nodes[a.0].data.data;
        let mut out = vec![T::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(a);
        self.push(Array::from_vec(vec![c, r], out), needs, Op::Transpose(a))
    }

    // ---- activations ----

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.map(|x| x.maxv(T::ZERO));
        let needs = self.needs(a);
        self.push(data, needs, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.map(|x| T::ONE / (T::ONE + (-x).exp()));
        let needs = self.needs(a);
        self.push(data, needs, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.map(|x| x.tanh());
        let needs = self.needs(a);
        self.push(data, needs, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.map(|x| x.exp());
        let needs = self.needs(a);
        self.push(data, needs, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.map(|x| x.ln());
        let needs = self.needs(a);
        self.push(data, needs, Op::Ln(a))
    }

    // ---- softmax family ----

    fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let shape = self.shape(a).to_vec();
        let (outer, ax, inner) = Self::split_axis(&shape, axis);
        let mut out = vec![T::ZERO; self.nodes[a.0].data.numel()];
        kn::softmax_fwd(&self.nodes[a.0].data.data, outer, ax, inner, &mut out);
        let needs = self.needs(a);
        self.push(Array::from_vec(shape, out), needs, Op::Softmax(a, axis))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Var {
        let shape = self.shape(a).to_vec();
        let (outer, ax, inner) = Self::split_axis(&shape, axis);
        let mut out = vec![T::ZERO; self.nodes[a.0].data.numel()];
        kn::log_softmax_fwd(&self.nodes[a.0].data.data, outer, ax, inner, &mut out);
        let needs = self.needs(a);
        self.push(Array::from_vec(shape, out), needs, Op::LogSoftmax(a, axis))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.nodes[a.0].data.data.iter().copied().sum();
        let needs = self.needs(a);
        self.push(Array::scalar(s), needs, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_f64(self.nodes[a.0].data.numel() as f64);
        let s: T = self.nodes[a.0].data.data.iter().copied().sum();
        let needs = self.needs(a);
        self.push(Array::scalar(s / n), needs, Op::Mean(a))
    }

    /// [n,c] -> [c], mean over rows.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        assert_eq!(s.len(), 2, "mean_rows takes a matrix, got {s:?}");
        let (n, c) = (s[0], s[1]);
        let inv = T::from_f64(1.0 / n as f64);
        let src = &self.nodes[a.0].data.data;
        let mut out = vec![T::ZERO; c];
        for r in 0..n {
            for j in 0..c {
                out[j] += src[r * c + j];
            }
        }
        for v in out.iter_mut() {
            *v *= inv;
        }
        let needs = self.needs(a);
        self.push(Array::from_vec(vec![c], out), needs, Op::MeanRows(a))
    }

    // ---- broadcasts ----

    /// [n,c] + [c] row-wise.
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb == [sa[1]], "add_row_broadcast {sa:?} + {sb:?}");
        let (n, c) = (sa[0], sa[1]);
        let bv = &self.nodes[b.0].data.data;
        let av = &self.nodes[a.0].data.data;
        let mut out = vec![T::ZERO; n * c];
        for r in 0..n {
            for j in 0..c {
                out[r * c + j] = av[r * c + j] + bv[j];
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Array::from_vec(sa, out), needs, Op::AddRowBroadcast(a, b))
    }

    /// [c,h,w] + [c] per channel.
    pub fn add_channel_bias(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb == [sa[0]], "add_channel_bias {sa:?} + {sb:?}");
        let plane = sa[1] * sa[2];
        let bv = &self.nodes[b.0].data.data;
        let av = &self.nodes[a.0].data.data;
        let mut out = vec![T::ZERO; av.len()];
        for ch in 0..sa[0] {
            let bias = bv[ch];
            for i in 0..plane {
                out[ch * plane + i] = av[ch * plane + i] + bias;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Array::from_vec(sa, out), needs, Op::AddChannelBias(a, b))
    }

    /// [c,h,w] * [1,h,w], the mask broadcast across channels.
    pub fn mul_channel_broadcast(&mut self, a: Var, m: Var) -> Var {
        let (sa, sm) = (self.shape(a).to_vec(), self.shape(m).to_vec());
        assert!(
            sa.len() == 3 && sm.len() == 3 && sm[0] == 1 && sm[1..] == sa[1..],
            "mul_channel_broadcast {sa:?} * {sm:?}"
        );
        let plane = sa[1] * sa[2];
        let mv = &self.nodes[m.0].data.data;
        let av = &self.nodes[a.0].data.data;
        let mut out = vec![T::ZERO; av.len()];
        for ch in 0..sa[0] {
            for i in 0..plane {
                out[ch * plane + i] = av[ch * plane + i] * mv[i];
            }
        }
        let needs = self.needs(a) || self.needs(m);
        self.push(Array::from_vec(sa, out), needs, Op::MulChannelBroadcast(a, m))
    }

    // ---- shape ops ----

    /// Concatenate along axis 0; trailing extents must agree.
    pub fn concat0(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa[1..], sb[1..], "concat0 trailing extents differ: {sa:?} vs {sb:?}");
        let mut shape = sa.clone();
        shape[0] = sa[0] + sb[0];
        let mut data = self.nodes[a.0].data.data.clone();
        data.extend_from_slice(&self.nodes[b.0].data.data);
        let needs = self.needs(a) || self.needs(b);
        self.push(Array::from_vec(shape, data), needs, Op::Concat0(a, b))
    }

    /// Rows [start, start+len) along axis 0.
    pub fn slice0(&mut self, a: Var, start: usize, len: usize) -> Var {
        let sa = self.shape(a).to_vec();
        assert!(start + len <= sa[0], "slice0 [{start},{}) of {sa:?}", start + len);
        let stride: usize = sa[1..].iter().product();
        let mut shape = sa.clone();
        shape[0] = len;
        let data = self.nodes[a.0].data.data[start * stride..(start + len) * stride].to_vec();
        let needs = self.needs(a);
        self.push(Array::from_vec(shape, data), needs, Op::Slice0(a, start, len))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[0] == sb[0], "concat_cols {sa:?} | {sb:?}");
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let av = &self.nodes[a.0].data.data;
        let bv = &self.nodes[b.0].data.data;
        let mut out = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            out.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Array::from_vec(vec![n, ca + cb], out), needs, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let sa = self.shape(a).to_vec();
        assert!(sa.len() == 2 && start + len <= sa[1], "slice_cols [{start},{}) of {sa:?}", start + len);
        let (n, c) = (sa[0], sa[1]);
        let av = &self.nodes[a.0].data.data;
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&av[r * c + start..r * c + start + len]);
        }
        let needs = self.needs(a);
        self.push(Array::from_vec(vec![n, len], out), needs, Op::SliceCols(a, start, len))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.nodes[a.0].data.numel(), "reshape {:?} -> {shape:?}", self.shape(a));
        let data = Array::from_vec(shape, self.nodes[a.0].data.data.clone());
        let needs = self.needs(a);
        self.push(data, needs, Op::Reshape(a))
    }

    /// Gather rows of a [n,c] matrix by index (rows may repeat).
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let sa = self.shape(a).to_vec();
        assert_eq!(sa.len(), 2, "gather_rows takes a matrix, got {sa:?}");
        let (n, c) = (sa[0], sa[1]);
        let av = &self.nodes[a.0].data.data;
        let mut out = Vec::with_capacity(indices.len() * c);
        for &r in &indices {
            assert!(r < n, "gather_rows index {r} out of range {n}");
            out.extend_from_slice(&av[r * c..(r + 1) * c]);
        }
        let needs = self.needs(a);
        self.push(Array::from_vec(vec![indices.len(), c], out), needs, Op::GatherRows(a, indices))
    }

    // ---- structured ops ----

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(sx.len() == 3 && sw.len() == 4, "conv2d shapes {sx:?}, {sw:?}");
        assert_eq!(sx[0], sw[1], "conv2d: input channels {:?} vs weight {:?}", sx, sw);
        assert_eq!(sw[2], sw[3], "conv2d: kernel must be square, got {sw:?}");
        assert_eq!(sw[2] % 2, 1, "conv2d: kernel extent must be odd, got {sw:?}");
        let (cin, h, wid) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        let (oh, ow) = kn::conv2d_out_size(h, wid, k, stride, pad);
        let mut out = vec![T::ZERO; cout * oh * ow];
        kn::conv2d_fwd(
            &self.nodes[x.0].data.data,
            &self.nodes[w.0].data.data,
            cin,
            h,
            wid,
            cout,
            k,
            stride,
            pad,
            &mut out,
        );
        let needs = self.needs(x) || self.needs(w);
        self.push(Array::from_vec(vec![cout, oh, ow], out), needs, Op::Conv2d { x, w, stride, pad })
    }

    pub fn upsample2x(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 3, "upsample2x takes [c,h,w], got {s:?}");
        let mut out = vec![T::ZERO; s[0] * 4 * s[1] * s[2]];
        kn::upsample2x_fwd(&self.nodes[a.0].data.data, s[0], s[1], s[2], &mut out);
        let needs = self.needs(a);
        self.push(Array::from_vec(vec![s[0], 2 * s[1], 2 * s[2]], out), needs, Op::Upsample2x(a))
    }

    /// Backward warp of src [c,h,w] by normalized flow [2,h,w].
    pub fn grid_sample(&mut self, src: Var, flow: Var) -> Var {
        let (ss, sf) = (self.shape(src).to_vec(), self.shape(flow).to_vec());
        assert!(ss.len() == 3, "grid_sample src must be [c,h,w], got {ss:?}");
        assert!(
            sf.len() == 3 && sf[0] == 2 && sf[1..] == ss[1..],
            "grid_sample flow {sf:?} does not match src {ss:?}"
        );
        let (c, h, w) = (ss[0], ss[1], ss[2]);
        let mut out = vec![T::ZERO; c * h * w];
        kn::grid_sample_fwd(&self.nodes[src.0].data.data, &self.nodes[flow.0].data.data, c, h, w, &mut out);
        let needs = self.needs(src) || self.needs(flow);
        self.push(Array::from_vec(ss, out), needs, Op::GridSample { src, flow })
    }

    /// Layer normalization over the last axis with learned gain/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().expect("layer_norm on rank-0");
        assert_eq!(self.shape(gamma), &[d], "layer_norm gamma");
        assert_eq!(self.shape(beta), &[d], "layer_norm beta");
        let xv = &self.nodes[x.0].data.data;
        let gv = &self.nodes[gamma.0].data.data;
        let bv = &self.nodes[beta.0].data.data;
        let rows = xv.len() / d;
        let mut out = vec![T::ZERO; xv.len()];
        let inv_d = T::from_f64(1.0 / d as f64);
        let epsv = T::from_f64(eps);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let inv_std = T::ONE / (var + epsv).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv_std * gv[j] + bv[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(Array::from_vec(sx, out), needs, Op::LayerNorm { x, gamma, beta, eps })
    }

    // ---- composites ----

    /// x[n,in] * w[in,out] + b[out]
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row_broadcast(xw, b)
    }

    /// mean((a - b)^2)
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    // ---- backward ----

    /// Accumulate into the scratch gradient of `v` during a backward
    /// pass, skipping nodes that do not require gradient.
    fn acc_into(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs {
            return;
        }
        let numel = self.nodes[v.0].data.numel();
        let slot = &mut self.scratch[v.0];
        if slot.is_none() {
            *slot = Some(vec![T::ZERO; numel]);
        }
        f(slot.as_mut().unwrap());
    }

    /// Reverse pass from a scalar loss. Repeated calls without a fresh
    /// tape accumulate gradients additively: each pass propagates only
    /// its own seed through scratch buffers, then folds the result into
    /// the persistent per-node gradients.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.nodes[loss.0].data.numel(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        assert!(
            self.nodes[loss.0].needs,
            "backward: loss is not connected to any differentiable leaf"
        );
        self.scratch = vec![None; self.nodes.len()];
        self.scratch[loss.0] = Some(vec![T::ONE]);

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs {
                continue;
            }
            let g = match self.scratch[idx].take() {
                Some(g) => g,
                None => continue,
            };
            // fold this pass's contribution into the persistent grad
            {
                let node = &mut self.nodes[idx];
                let grad = node.grad.get_or_insert_with(|| vec![T::ZERO; node.data.numel()]);
                for (gv, sv) in grad.iter_mut().zip(g.iter()) {
                    *gv += *sv;
                }
            }
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.acc_into(a, |d| {
                        for (dv, gv) in d.iter_mut().zip(g.iter()) {
                            *dv += *gv;
                        }
                    });
                    self.acc_into(b, |d| {
                        for (dv, gv) in d.iter_mut().zip(g.iter()) {
                            *dv += *gv;
                        }
                    });
                }
                Op::Sub(a, b) => {
                    self.acc_into(a, |d| {
                        for (dv, gv) in d.iter_mut().zip(g.iter()) {
                            *dv += *gv;
                        }
                    });
                    self.acc_into(b, |d| {
                        for (dv, gv) in d.iter_mut().zip(g.iter()) {
                            *dv -= *gv;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let bd = self.nodes[b.0].data.data.clone();
                    self.acc_into(a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * bd[i];
                        }
                    });
                    let ad = self.nodes[a.0].data.data.clone();
                    self.acc_into(b, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * ad[i];
                        }
                    });
                }
                Op::Scale(a, c) => {
                    let cv = T::from_f64(c);
                    self.acc_into(a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * cv;
                        }
                    });
                }
                Op::AddScalar(a) => {
                    self.acc_into(a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i];
                        }
                    });
                }
                Op::Matmul(a, b) => {
                    let sa = self.shape(a).to_vec();
                    let sb = self.shape(b).to_vec();
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if self.needs(a) {
                        let bd = self.nodes[b.0].data.data.clone();
                        self.acc_into(a, |d| kn::matmul_nt(&g, &bd, m, n, k, d));
                    }
                    if self.needs(b) {
                        let ad = self.nodes[a.0].data.data.clone();
                        self.acc_into(b, |d| kn::matmul_tn(&ad, &g, k, m, n, d));
                    }
                }
                Op::Transpose(a) => {
                    let s = self.shape(a).to_vec();
                    let (r, c) = (s[0], s[1]);
                    self.acc_into(a, |d| {
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
                Op::Softmax(a, axis) => {
                    let out = self.nodes[idx].data.data.clone();
                    let shape = self.shape(a).to_vec();
                    let (outer, ax, inner) = Self::split_axis(&shape, axis);
                    self.acc_into(a, |d| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let mut dot = T::ZERO;
                                for aix in 0..ax {
                                    let f = (o * ax + aix) * inner + i;
                                    dot += g[f] * out[f];
                                }
                                for aix in 0..ax {
                                    let f = (o * ax + aix) * inner + i;
                                    d[f] += out[f] * (g[f] - dot);
                                }
                            }
                        }
                    });
                }
                Op::LogSoftmax(a, axis) => {
                    let out = self.nodes[idx].data.data.clone();
                    let shape = self.shape(a).to_vec();
                    let (outer, ax, inner) = Self::split_axis(&shape, axis);
                    self.acc_into(a, |d| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let mut gsum = T::ZERO;
                                for aix in 0..ax {
                                    gsum += g[(o * ax + aix) * inner + i];
                                }
                                for aix in 0..ax {
                                    let f = (o * ax + aix) * inner + i;
                                    d[f] += g[f] - out[f].exp() * gsum;
                                }
                            }
                        }
                    });
                }
                Op::Relu(a) => {
                    let inp = self.nodes[a.0].data.data.clone();
                    self.acc_into(a, |d| {
                        for i in 0..d.len() {
                            if inp[i] > T::ZERO {
                                d[i] += g[i];
                            }
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let out = self.nodes[idx].data.data.clone();
                    self.acc_into(a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * out[i] * (T::ONE - out[i]);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let out = self.nodes[idx].data.data.clone();
                    self.acc_into(a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * (T::ONE - out[i] * out[i]);
                        }
                    });
                }
                Op::Exp(a) => {
                    let out = self.nodes[idx].data.data.clone();
                    self.acc_into(a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * out[i];
                        }
                    });
                }
                Op::Ln(a) => {
                    let inp = self.nodes[a.0].data.data.clone();
                    self.acc_into(a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] / inp[i];
                        }
                    });
                }
                Op::Sum(a) => {
                    let gv = g[0];
                    self.acc_into(a, |d| {
                        for dv in d.iter_mut() {
                            *dv += gv;
                        }
                    });
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].data.numel();
                    let gv = g[0] / T::from_f64(n as f64);
                    self.acc_into(a, |d| {
                        for dv in d.iter_mut() {
                            *dv += gv;
                        }
                    });
                }
                Op::MeanRows(a) => {
                    let s = self.shape(a).to_vec();
                    let (n, c) = (s[0], s[1]);
                    let inv = T::from_f64(1.0 / n as f64);
                    self.acc_into(a, |d| {
                        for r in 0..n {
                            for j in 0..c {
                                d[r * c + j] += g[j] * inv;
                            }
                        }
                    });
                }
                Op::AddRowBroadcast(a, b) => {
                    self.acc_into(a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i];
                        }
                    });
                    let c = self.shape(b).to_vec()[0];
                    let n = g.len() / c;
                    self.acc_into(b, |d| {
                        for r in 0..n {
                            for j in 0..c {
                                d[j] += g[r * c + j];
                            }
                        }
                    });
                }
                Op::AddChannelBias(a, b) => {
                    self.acc_into(a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i];
                        }
                    });
                    let ch = self.shape(b).to_vec()[0];
                    let plane = g.len() / ch;
                    self.acc_into(b, |d| {
                        for c in 0..ch {
                            for i in 0..plane {
                                d[c] += g[c * plane + i];
                            }
                        }
                    });
                }
                Op::MulChannelBroadcast(a, m) => {
                    let sa = self.shape(a).to_vec();
                    let plane = sa[1] * sa[2];
                    let md = self.nodes[m.0].data.data.clone();
                    self.acc_into(a, |d| {
                        for c in 0..sa[0] {
                            for i in 0..plane {
                                d[c * plane + i] += g[c * plane + i] * md[i];
                            }
                        }
                    });
                    let ad = self.nodes[a.0].data.data.clone();
                    self.acc_into(m, |d| {
                        for c in 0..sa[0] {
                            for i in 0..plane {
                                d[i] += g[c * plane + i] * ad[c * plane + i];
                            }
                        }
                    });
                }
                Op::Concat0(a, b) => {
                    let na = self.nodes[a.0].data.numel();
                    self.acc_into(a, |d| {
                        for i in 0..na {
                            d[i] += g[i];
                        }
                    });
                    self.acc_into(b, |d| {
                        for (i, dv) in d.iter_mut().enumerate() {
                            *dv += g[na + i];
                        }
                    });
                }
                Op::Slice0(a, start, _len) => {
                    let stride: usize = self.shape(a)[1..].iter().product();
                    self.acc_into(a, |d| {
                        for (i, gv) in g.iter().enumerate() {
                            d[start * stride + i] += *gv;
                        }
                    });
                }
                Op::ConcatCols(a, b) => {
                    let sa = self.shape(a).to_vec();
                    let sb = self.shape(b).to_vec();
                    let (n, ca, cb) = (sa[0], sa[1], sb[1]);
                    self.acc_into(a, |d| {
                        for r in 0..n {
                            for j in 0..ca {
                                d[r * ca + j] += g[r * (ca + cb) + j];
                            }
                        }
                    });
                    self.acc_into(b, |d| {
                        for r in 0..n {
                            for j in 0..cb {
                                d[r * cb + j] += g[r * (ca + cb) + ca + j];
                            }
                        }
                    });
                }
                Op::SliceCols(a, start, len) => {
                    let c = self.shape(a).to_vec()[1];
                    let n = self.shape(a).to_vec()[0];
                    self.acc_into(a, |d| {
                        for r in 0..n {
                            for j in 0..len {
                                d[r * c + start + j] += g[r * len + j];
                            }
                        }
                    });
                }
                Op::Reshape(a) => {
                    self.acc_into(a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i];
                        }
                    });
                }
                Op::GatherRows(a, ref indices) => {
                    let c = self.shape(a).to_vec()[1];
                    let idxs = indices.clone();
                    self.acc_into(a, |d| {
                        for (row, &src) in idxs.iter().enumerate() {
                            for j in 0..c {
                                d[src * c + j] += g[row * c + j];
                            }
                        }
                    });
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let sx = self.shape(x).to_vec();
                    let sw = self.shape(w).to_vec();
                    let (cin, h, wid) = (sx[0], sx[1], sx[2]);
                    let (cout, k) = (sw[0], sw[2]);
                    if self.needs(x) {
                        let wd = self.nodes[w.0].data.data.clone();
                        self.acc_into(x, |d| {
                            kn::conv2d_bwd_x(&g, &wd, cin, h, wid, cout, k, stride, pad, d)
                        });
                    }
                    if self.needs(w) {
                        let xd = self.nodes[x.0].data.data.clone();
                        self.acc_into(w, |d| {
                            kn::conv2d_bwd_w(&g, &xd, cin, h, wid, cout, k, stride, pad, d)
                        });
                    }
                }
                Op::Upsample2x(a) => {
                    let s = self.shape(a).to_vec();
                    self.acc_into(a, |d| kn::upsample2x_bwd(&g, s[0], s[1], s[2], d));
                }
                Op::GridSample { src, flow } => {
                    let ss = self.shape(src).to_vec();
                    let (c, h, w) = (ss[0], ss[1], ss[2]);
                    let srcd = self.nodes[src.0].data.data.clone();
                    let flowd = self.nodes[flow.0].data.data.clone();
                    let needs_src = self.needs(src);
                    let needs_flow = self.needs(flow);
                    let mut dsrc = if needs_src { Some(vec![T::ZERO; srcd.len()]) } else { None };
                    let mut dflow = if needs_flow { Some(vec![T::ZERO; flowd.len()]) } else { None };
                    kn::grid_sample_bwd(
                        &srcd,
                        &flowd,
                        &g,
                        c,
                        h,
                        w,
                        dsrc.as_deref_mut(),
                        dflow.as_deref_mut(),
                    );
                    if let Some(ds) = dsrc {
                        self.acc_into(src, |d| {
                            for i in 0..d.len() {
                                d[i] += ds[i];
                            }
                        });
                    }
                    if let Some(df) = dflow {
                        self.acc_into(flow, |d| {
                            for i in 0..d.len() {
                                d[i] += df[i];
                            }
                        });
                    }
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xd = self.nodes[x.0].data.data.clone();
                    let gd = self.nodes[gamma.0].data.data.clone();
                    let d_ = gd.len();
                    let rows = xd.len() / d_;
                    let inv_d = T::from_f64(1.0 / d_ as f64);
                    let epsv = T::from_f64(eps);
                    let mut dx = vec![T::ZERO; xd.len()];
                    let mut dgamma = vec![T::ZERO; d_];
                    let mut dbeta = vec![T::ZERO; d_];
                    for r in 0..rows {
                        let row = &xd[r * d_..(r + 1) * d_];
                        let grow = &g[r * d_..(r + 1) * d_];
                        let mean = row.iter().copied().sum::<T>() * inv_d;
                        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                        let inv_std = T::ONE / (var + epsv).sqrt();
                        let xhat: Vec<T> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                        let mut dxhat = vec![T::ZERO; d_];
                        for j in 0..d_ {
                            dgamma[j] += grow[j] * xhat[j];
                            dbeta[j] += grow[j];
                            dxhat[j] = grow[j] * gd[j];
                        }
                        let sum_dxhat: T = dxhat.iter().copied().sum();
                        let sum_dxhat_xhat: T =
                            dxhat.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum();
                        for j in 0..d_ {
                            dx[r * d_ + j] += inv_std
                                * inv_d
                                * (T::from_f64(d_ as f64) * dxhat[j]
                                    - sum_dxhat
                                    - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    self.acc_into(x, |d| {
                        for i in 0..d.len() {
                            d[i] += dx[i];
                        }
                    });
                    self.acc_into(gamma, |d| {
                        for i in 0..d.len() {
                            d[i] += dgamma[i];
                        }
                    });
                    self.acc_into(beta, |d| {
                        for i in 0..d.len() {
                            d[i] += dbeta[i];
                        }
                    });
                }
            }
        }
        self.scratch.clear();
    }
}
