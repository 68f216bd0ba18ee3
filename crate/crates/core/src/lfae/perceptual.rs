//! Fixed random convolutional feature net: the perceptual-loss
//! surrogate. Three stride-2 conv layers whose weights are drawn once
//! from a pinned seed, frozen, and stored with every checkpoint so the
//! metric is stable across runs.

use crate::tensor::{Binding, ParamStore, Real, Rng, Var};

pub const PERCEPTUAL_SEED: u64 = 0;

const WIDTHS: [usize; 3] = [8, 16, 16];

#[derive(Clone, Debug, Default)]
pub struct PerceptualNet;

impl PerceptualNet {
    /// Registers per.l{1,2,3}.w as frozen tensors. Weights depend only
    /// on the pinned seed, never on the run seed.
    pub fn init<T: Real>(params: &mut ParamStore<T>) -> Self {
        let mut cin = 3usize;
        for (i, &cout) in WIDTHS.iter().enumerate() {
            let name = format!("per.l{}.w", i + 1);
            if !params.contains(&name) {
                let mut rng = Rng::derive(PERCEPTUAL_SEED, &name);
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let n = cout * cin * 9;
                let w = crate::tensor::Array::from_vec(
                    vec![cout, cin, 3, 3],
                    rng.normal_vec(n, std),
                );
                params.insert_frozen(&name, w);
            }
            cin = cout;
        }
        PerceptualNet
    }

    /// Feature maps after each of the three layers.
    pub fn features<T: Real>(&self, b: &mut Binding<T>, frame: Var) -> Vec<Var> {
        let mut feats = Vec::with_capacity(3);
        let mut h = frame;
        for i in 0..3 {
            let w = b.param(&format!("per.l{}.w", i + 1));
            h = b.tape.conv2d(h, w, 2, 1);
            h = b.tape.relu(h);
            feats.push(h);
        }
        feats
    }
}

/// Mean squared feature distance, averaged over the three layers.
pub fn perceptual_loss<T: Real>(b: &mut Binding<T>, net: &PerceptualNet, a: Var, target: Var) -> Var {
    let fa = net.features(b, a);
    let ft = net.features(b, target);
    let mut acc: Option<Var> = None;
    for (xa, xt) in fa.into_iter().zip(ft) {
        let l = b.tape.mse_loss(xa, xt);
        acc = Some(match acc {
            None => l,
            Some(prev) => b.tape.add(prev, l),
        });
    }
    let total = acc.expect("three layers");
    b.tape.scale(total, 1.0 / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Array, Rng};

    #[test]
    fn weights_are_pinned_to_seed_zero() {
        let mut p1: ParamStore<f32> = ParamStore::new();
        PerceptualNet::init(&mut p1);
        let mut p2: ParamStore<f32> = ParamStore::new();
        PerceptualNet::init(&mut p2);
        assert_eq!(p1.get("per.l1.w"), p2.get("per.l1.w"));
        assert!(p1.is_frozen("per.l2.w"));
    }

    #[test]
    fn identical_frames_zero_distance_and_symmetry() {
        let mut params: ParamStore<f64> = ParamStore::new();
        let net = PerceptualNet::init(&mut params);
        let mut rng = Rng::from_seed(4);
        let a = Array::from_vec(vec![3, 32, 32], rng.uniform_vec(3 * 32 * 32, 0.0, 1.0));
        let c = Array::from_vec(vec![3, 32, 32], rng.uniform_vec(3 * 32 * 32, 0.0, 1.0));
        let mut b = Binding::new(&params);
        let av = b.tape.constant(a.clone());
        let av2 = b.tape.constant(a);
        let cv = b.tape.constant(c);
        let same = perceptual_loss(&mut b, &net, av, av2);
        assert_eq!(b.tape.value(same), 0.0);
        let ab = perceptual_loss(&mut b, &net, av, cv);
        let ba = perceptual_loss(&mut b, &net, cv, av);
        assert_eq!(b.tape.value(ab), b.tape.value(ba));
        assert!(b.tape.value(ab) > 0.0);
    }
}
