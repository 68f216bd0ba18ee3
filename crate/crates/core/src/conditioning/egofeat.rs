//! Fixed random spatiotemporal feature net for the "egocentric video"
//! motion-fusion variant: two strided 3-D convs, relu between, spatial
//! average pooling per frame. Weights are pinned to their own seed and
//! never trained; the time axis keeps full resolution so each frame
//! gets one feature row.

use crate::tensor::kernels::{conv3d_fwd, conv3d_out_size};
use crate::tensor::{Array, Real, Rng};

pub const EGO_FEAT_DIM: usize = 16;
const EGO_FEAT_SEED: u64 = 0x0E60;
const WIDTHS: [usize; 2] = [8, EGO_FEAT_DIM];

fn fixed_weights<T: Real>(layer: usize, cin: usize, cout: usize) -> Vec<T> {
    let mut rng = Rng::derive_indexed(EGO_FEAT_SEED, "egofeat", layer as u64);
    rng.normal_vec(cout * cin * 27, (2.0 / (cin * 27) as f64).sqrt())
}

/// Frames [T][3,S,S] -> [T, EGO_FEAT_DIM], one pooled feature per frame.
pub fn ego_video_features<T: Real>(frames: &[Array<T>]) -> Array<T> {
    let t = frames.len();
    assert!(t > 0, "empty clip");
    let s = frames[0].shape[1];
    // pack to [3, T, S, S]
    let mut x = vec![T::ZERO; 3 * t * s * s];
    for (ti, f) in frames.iter().enumerate() {
        assert_eq!(f.shape, vec![3, s, s]);
        for c in 0..3 {
            for y in 0..s {
                for xx in 0..s {
                    x[((c * t + ti) * s + y) * s + xx] = f.chw(c, y, xx);
                }
            }
        }
    }
    let mut cin = 3usize;
    let mut dims = (t, s, s);
    for (layer, &cout) in WIDTHS.iter().enumerate() {
        let w = fixed_weights::<T>(layer, cin, cout);
        let stride = (1, 2, 2);
        let (ot, oh, ow) = conv3d_out_size(dims.0, dims.1, dims.2, 3, stride);
        let mut out = vec![T::ZERO; cout * ot * oh * ow];
        conv3d_fwd(&x, &w, cin, dims.0, dims.1, dims.2, cout, 3, stride, &mut out);
        for v in out.iter_mut() {
            *v = v.maxv(T::ZERO);
        }
        x = out;
        cin = cout;
        dims = (ot, oh, ow);
    }
    // spatial average pool per frame
    let (ot, oh, ow) = dims;
    assert_eq!(ot, t, "time axis must keep full resolution");
    let plane = oh * ow;
    let inv = T::from_f64(1.0 / plane as f64);
    let mut feats = vec![T::ZERO; t * EGO_FEAT_DIM];
    for c in 0..EGO_FEAT_DIM {
        for ti in 0..t {
            let mut acc = T::ZERO;
            for i in 0..plane {
                acc += x[(c * t + ti) * plane + i];
            }
            feats[ti * EGO_FEAT_DIM + c] = acc * inv;
        }
    }
    Array::from_vec(vec![t, EGO_FEAT_DIM], feats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn features_are_deterministic_and_temporally_sensitive() {
        let mut rng = Rng::from_seed(90);
        let frames: Vec<Array<f32>> = (0..4)
            .map(|_| Array::from_vec(vec![3, 16, 16], rng.uniform_vec(3 * 256, 0.0, 1.0)))
            .collect();
        let a = ego_video_features(&frames);
        let b = ego_video_features(&frames);
        assert_eq!(a.data, b.data);
        assert_eq!(a.shape, vec![4, EGO_FEAT_DIM]);
        let mut reversed = frames.clone();
        reversed.reverse();
        let c = ego_video_features(&reversed);
        assert_ne!(a.data, c.data, "frame order must matter");
    }
}
