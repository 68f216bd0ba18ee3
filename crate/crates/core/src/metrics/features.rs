//! Fixed random spatiotemporal feature extractor standing in for a
//! pretrained video network. Weights are pinned to EXTRACTOR_SEED and
//! shared across every comparison; absolute metric values are therefore
//! only meaningful within this repository.

use crate::tensor::kernels::{conv3d_fwd, conv3d_out_size};
use crate::tensor::{Array, Rng};

pub const FEATURE_DIM: usize = 64;
pub const EXTRACTOR_SEED: u64 = 0xF3A7;
pub const EXTRACTOR_ID: &str = "rand3d-v1";

const WIDTHS: [usize; 3] = [16, 32, FEATURE_DIM];
const STRIDES: [(usize, usize, usize); 3] = [(1, 2, 2), (2, 2, 2), (2, 2, 2)];

#[derive(Clone, Debug)]
pub struct VideoExtractor {
    pub frames: usize,
    weights: Vec<Vec<f32>>,
    biases: Vec<Vec<f32>>,
}

impl VideoExtractor {
    pub fn new(frames: usize) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut cin = 3usize;
        for (layer, &cout) in WIDTHS.iter().enumerate() {
            let mut rng = Rng::derive_indexed(EXTRACTOR_SEED, "extractor-w", layer as u64);
            weights.push(rng.normal_vec(cout * cin * 27, (2.0 / (cin * 27) as f64).sqrt()));
            let mut rng_b = Rng::derive_indexed(EXTRACTOR_SEED, "extractor-b", layer as u64);
            biases.push(rng_b.normal_vec(cout, 0.1));
            cin = cout;
        }
        VideoExtractor { frames, weights, biases }
    }

    /// Clip frames [T][3,S,S] -> one D-vector by conv stack plus global
    /// average pooling.
    pub fn extract(&self, frames: &[Array<f32>]) -> Result<Vec<f32>, super::EvalError> {
        if frames.len() != self.frames {
            return Err(super::EvalError::FrameCount {
                expected: self.frames,
                got: frames.len(),
            });
        }
        let s = frames[0].shape[1];
        let t = frames.len();
        let mut x = vec![0f32; 3 * t * s * s];
        for (ti, f) in frames.iter().enumerate() {
            assert_eq!(f.shape, vec![3, s, s], "frame shape");
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
        for layer in 0..WIDTHS.len() {
            let cout = WIDTHS[layer];
            let (ot, oh, ow) = conv3d_out_size(dims.0, dims.1, dims.2, 3, STRIDES[layer]);
            let mut out = vec![0f32; cout * ot * oh * ow];
            conv3d_fwd(&x, &self.weights[layer], cin, dims.0, dims.1, dims.2, cout, 3, STRIDES[layer], &mut out);
            let vol = ot * oh * ow;
            for c in 0..cout {
                let bias = self.biases[layer][c];
                for v in out[c * vol..(c + 1) * vol].iter_mut() {
                    *v = (*v + bias).max(0.0);
                }
            }
            x = out;
            cin = cout;
            dims = (ot, oh, ow);
        }
        let vol = dims.0 * dims.1 * dims.2;
        let mut feat = vec![0f32; FEATURE_DIM];
        for (c, f) in feat.iter_mut().enumerate() {
            *f = x[c * vol..(c + 1) * vol].iter().sum::<f32>() / vol as f32;
        }
        Ok(feat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(seed: u64, t: usize, s: usize) -> Vec<Array<f32>> {
        let mut rng = Rng::from_seed(seed);
        (0..t).map(|_| Array::from_vec(vec![3, s, s], rng.uniform_vec(3 * s * s, 0.0, 1.0))).collect()
    }

    #[test]
    fn identical_clips_identical_features() {
        let ex = VideoExtractor::new(4);
        let c = clip(1, 4, 32);
        assert_eq!(ex.extract(&c).unwrap(), ex.extract(&c).unwrap());
    }

    #[test]
    fn zero_clip_gives_finite_bias_only_vector() {
        let ex = VideoExtractor::new(4);
        let zeros: Vec<Array<f32>> = (0..4).map(|_| Array::zeros(vec![3, 32, 32])).collect();
        let f = ex.extract(&zeros).unwrap();
        assert!(f.iter().all(|v| v.is_finite()));
        assert!(f.iter().any(|&v| v != 0.0), "bias path must produce a nonzero vector");
    }

    #[test]
    fn permuting_frames_changes_the_vector() {
        let ex = VideoExtractor::new(4);
        let c = clip(2, 4, 32);
        let mut shuffled = c.clone();
        shuffled.swap(0, 3);
        shuffled.swap(1, 2);
        assert_ne!(ex.extract(&c).unwrap(), ex.extract(&shuffled).unwrap());
    }

    #[test]
    fn frame_count_mismatch_is_an_error() {
        let ex = VideoExtractor::new(8);
        let c = clip(3, 4, 32);
        assert!(matches!(
            ex.extract(&c),
            Err(super::super::EvalError::FrameCount { expected: 8, got: 4 })
        ));
    }
}
