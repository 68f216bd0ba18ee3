use crate::tensor::{Binding, ParamStore, Real, Tape, Var};

/// Multi-head attention core: queries from `q` [n1,C], keys and values
/// from `kv` [n,C]. Per-head scores are softmax(q k^T / sqrt(C/h)); the
/// concatenated head outputs go through the output projection. No
/// residual here.
#[allow(clippy::too_many_arguments)]
pub fn attend<T: Real>(
    tape: &mut Tape<T>,
    q_tokens: Var,
    kv: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    heads: usize,
) -> Var {
    let width = tape.shape(q_tokens)[1];
    assert_eq!(width % heads, 0, "width {width} not divisible by heads {heads}");
    let ch = width / heads;
    let scale = 1.0 / (ch as f64).sqrt();
    let q = tape.matmul(q_tokens, wq);
    let k = tape.matmul(kv, wk);
    let v = tape.matmul(kv, wv);
    let mut merged: Option<Var> = None;
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * ch, ch);
        let kh = tape.slice_cols(k, h * ch, ch);
        let vh = tape.slice_cols(v, h * ch, ch);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax(scaled, 1);
        let out = tape.matmul(attn, vh);
        merged = Some(match merged {
            None => out,
            Some(acc) => tape.concat_cols(acc, out),
        });
    }
    tape.matmul(merged.expect("at least one head"), wo)
}

/// Named q/k/v/o projections of one attention site.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub prefix: String,
    pub width: usize,
    pub heads: usize,
}

impl AttentionParams {
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
        AttentionParams { prefix: prefix.to_string(), width, heads }
    }

    pub fn names(prefix: &str) -> Vec<String> {
        ["wq", "wk", "wv", "wo"].iter().map(|p| format!("{prefix}.{p}")).collect()
    }

    pub fn attend<T: Real>(&self, b: &mut Binding<T>, q_tokens: Var, kv: Var) -> Var {
        let wq = b.param(&format!("{}.wq", self.prefix));
        let wk = b.param(&format!("{}.wk", self.prefix));
        let wv = b.param(&format!("{}.wv", self.prefix));
        let wo = b.param(&format!("{}.wo", self.prefix));
        attend(&mut b.tape, q_tokens, kv, wq, wk, wv, wo, self.heads)
    }

    /// Cross-attention in the paper's form: keys/values from the row
    /// concatenation [e1; e2] and a residual back onto e1. `e2 = None`
    /// degrades to self-only keys.
    pub fn cross<T: Real>(&self, b: &mut Binding<T>, e1: Var, e2: Option<Var>) -> Var {
        let d = match e2 {
            Some(other) => b.tape.concat0(e1, other),
            None => e1,
        };
        let a = self.attend(b, e1, d);
        b.tape.add(a, e1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Array, Rng};

    /// Straight-line single-head reference: no column splitting, scale
    /// by sqrt(C), explicit loops.
    fn reference_single_head(
        e1: &Array<f64>,
        e2: &Array<f64>,
        wq: &Array<f64>,
        wk: &Array<f64>,
        wv: &Array<f64>,
        wo: &Array<f64>,
    ) -> Vec<f64> {
        let n1 = e1.shape[0];
        let c = e1.shape[1];
        let n2 = e2.shape[0];
        let n = n1 + n2;
        let mut d = e1.data.clone();
        d.extend_from_slice(&e2.data);
        let matmul = |a: &[f64], b: &[f64], m: usize, k: usize, nn: usize| -> Vec<f64> {
            let mut out = vec![0.0; m * nn];
            for i in 0..m {
                for p in 0..k {
                    for j in 0..nn {
                        out[i * nn + j] += a[i * k + p] * b[p * nn + j];
                    }
                }
            }
            out
        };
        let q = matmul(&e1.data, &wq.data, n1, c, c);
        let k = matmul(&d, &wk.data, n, c, c);
        let v = matmul(&d, &wv.data, n, c, c);
        let mut y = vec![0.0; n1 * c];
        for i in 0..n1 {
            let mut scores = vec![0.0; n];
            for j in 0..n {
                for p in 0..c {
                    scores[j] += q[i * c + p] * k[j * c + p];
                }
                scores[j] /= (c as f64).sqrt();
            }
            let maxs = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - maxs).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..n {
                let a = exps[j] / sum;
                for p in 0..c {
                    y[i * c + p] += a * v[j * c + p];
                }
            }
        }
        let proj = matmul(&y, &wo.data, n1, c, c);
        // residual
        proj.iter().zip(e1.data.iter()).map(|(a, b)| a + b).collect()
    }

    #[test]
    fn two_query_three_key_matches_reference() {
        let mut rng = Rng::from_seed(77);
        let c = 6;
        let e1 = Array::from_vec(vec![2, c], rng.normal_vec(2 * c, 1.0));
        let e2 = Array::from_vec(vec![3, c], rng.normal_vec(3 * c, 1.0));
        let wq = Array::from_vec(vec![c, c], rng.normal_vec(c * c, 0.5));
        let wk = Array::from_vec(vec![c, c], rng.normal_vec(c * c, 0.5));
        let wv = Array::from_vec(vec![c, c], rng.normal_vec(c * c, 0.5));
        let wo = Array::from_vec(vec![c, c], rng.normal_vec(c * c, 0.5));
        let expected = reference_single_head(&e1, &e2, &wq, &wk, &wv, &wo);

        let mut t: Tape<f64> = Tape::new();
        let e1v = t.constant(e1);
        let e2v = t.constant(e2);
        let wqv = t.constant(wq);
        let wkv = t.constant(wk);
        let wvv = t.constant(wv);
        let wov = t.constant(wo);
        let d = t.concat0(e1v, e2v);
        let a = attend(&mut t, e1v, d, wqv, wkv, wvv, wov, 1);
        let y = t.add(a, e1v);
        for (got, want) in t.data(y).data.iter().zip(expected.iter()) {
            assert!((got - want).abs() < 1e-5, "attention mismatch: {got} vs {want}");
        }
    }

    #[test]
    fn zero_value_projection_is_pure_residual() {
        let mut rng = Rng::from_seed(3);
        let c = 4;
        let mut store: ParamStore<f64> = ParamStore::new();
        let attn = AttentionParams::init(&mut store, "test", c, 2, 0);
        *store.get_mut("test.wv") = Array::zeros(vec![c, c]);
        let e1 = Array::from_vec(vec![1, c], rng.normal_vec(c, 1.0));
        let mut b = Binding::new(&store);
        let e1v = b.tape.constant(e1.clone());
        let y = attn.cross(&mut b, e1v, None);
        assert_eq!(b.tape.data(y).data, e1.data, "W_v = 0 must leave e1 unchanged");
    }

    #[test]
    fn single_key_identity_weights_doubles_input() {
        // n1=1, n2=0, Wq=Wk=Wv=Wo=I, h=1: A=[1], Y = e1 + e1.
        let c = 3;
        let eye = Array::from_fn(vec![c, c], |i| if i % (c + 1) == 0 { 1.0 } else { 0.0 });
        let e1 = Array::from_vec(vec![1, c], vec![0.5, -1.0, 2.0]);
        let mut t: Tape<f64> = Tape::new();
        let e1v = t.constant(e1.clone());
        let eyev = t.constant(eye);
        let a = attend(&mut t, e1v, e1v, eyev, eyev, eyev, eyev, 1);
        let y = t.add(a, e1v);
        for (got, want) in t.data(y).data.iter().zip(e1.data.iter()) {
            assert!((got - 2.0 * want).abs() < 1e-12, "expected 2*e1, got {got} vs {want}");
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        // probe through the softmax op directly: rows of A sum to 1
        let mut rng = Rng::from_seed(11);
        let mut t: Tape<f64> = Tape::new();
        let scores = t.constant(Array::from_vec(vec![4, 5], rng.normal_vec(20, 3.0)));
        let a = t.softmax(scores, 1);
        let d = t.data(a);
        for r in 0..4 {
            let s: f64 = (0..5).map(|j| d.rc(r, j)).sum();
            assert!((s - 1.0).abs() < 1e-6);
            for j in 0..5 {
                assert!(d.rc(r, j) >= 0.0);
            }
        }
    }
}
