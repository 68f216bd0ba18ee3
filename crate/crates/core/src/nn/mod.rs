//! Shared trainable building blocks: multi-head attention, pre-norm
//! transformer layers, conv/residual stacks, MLPs.
//!
//! The math lives in free functions over tape vars; thin wrappers bind
//! named parameters from a store. Composite gradient checks reuse the
//! free functions directly.

pub mod attention;
pub mod blocks;

pub use attention::{attend, AttentionParams};
pub use blocks::{Conv2dLayer, Mlp, ResBlock, TransformerLayer};

use crate::tensor::gradcheck::Check;
use crate::tensor::{Array, Rng, Tape, Var};

/// Composite finite-difference checks over whole blocks.
pub fn composite_checks() -> Vec<Check> {
    let mut rng = Rng::from_seed(0xB10C);
    let c = 8usize;
    let heads = 2usize;
    let arr = |shape: &[usize], rng: &mut Rng, std: f64| -> Array<f64> {
        Array::from_vec(shape.to_vec(), rng.normal_vec(shape.iter().product(), std))
    };
    let mut checks = Vec::new();

    // cross-attention block: queries [2,c], keys/values [3,c], all four
    // projections differentiated
    checks.push(Check {
        name: "attention_block",
        covers: &["matmul", "softmax", "slice_cols", "concat_cols", "transpose", "concat0"],
        tol: 1e-4,
        inputs: vec![
            arr(&[2, c], &mut rng, 1.0),
            arr(&[3, c], &mut rng, 1.0),
            arr(&[c, c], &mut rng, 0.4),
            arr(&[c, c], &mut rng, 0.4),
            arr(&[c, c], &mut rng, 0.4),
            arr(&[c, c], &mut rng, 0.4),
        ],
        diff_mask: vec![true, true, true, true, true, true],
        build: Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let d = t.concat0(v[0], v[1]);
            let a = attend(t, v[0], d, v[2], v[3], v[4], v[5], heads);
            t.add(a, v[0])
        }),
    });

    // transformer layer at toy width
    checks.push(Check {
        name: "transformer_layer",
        covers: &["layer_norm", "matmul", "softmax", "relu", "add_row_broadcast"],
        tol: 1e-4,
        inputs: vec![
            arr(&[4, c], &mut rng, 1.0),
            arr(&[c, c], &mut rng, 0.4),
            arr(&[c, c], &mut rng, 0.4),
            arr(&[c, c], &mut rng, 0.4),
            arr(&[c, c], &mut rng, 0.4),
            Array::full(vec![c], 1.0),
            Array::zeros(vec![c]),
            arr(&[c, 2 * c], &mut rng, 0.4),
            Array::zeros(vec![2 * c]),
            arr(&[2 * c, c], &mut rng, 0.4),
            Array::zeros(vec![c]),
            Array::full(vec![c], 1.0),
            Array::zeros(vec![c]),
        ],
        diff_mask: vec![true; 13],
        build: Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let vars = blocks::TransformerVars {
                wq: v[1],
                wk: v[2],
                wv: v[3],
                wo: v[4],
                ln1_gamma: v[5],
                ln1_beta: v[6],
                mlp_w1: v[7],
                mlp_b1: v[8],
                mlp_w2: v[9],
                mlp_b2: v[10],
                ln2_gamma: v[11],
                ln2_beta: v[12],
                heads,
            };
            blocks::transformer_layer(t, v[0], &vars)
        }),
    });

    // residual conv block with a channel bias injection
    checks.push(Check {
        name: "res_block",
        covers: &["conv2d", "add_channel_bias", "relu", "add"],
        tol: 1e-4,
        inputs: vec![
            arr(&[3, 5, 5], &mut rng, 1.0),
            arr(&[3, 3, 3, 3], &mut rng, 0.3),
            arr(&[3], &mut rng, 0.3),
            arr(&[3, 3, 3, 3], &mut rng, 0.3),
            arr(&[3], &mut rng, 0.3),
            arr(&[3], &mut rng, 0.3),
        ],
        diff_mask: vec![true; 6],
        build: Box::new(|t: &mut Tape<f64>, v: &[Var]| {
            blocks::res_block(t, v[0], v[1], v[2], v[3], v[4], Some(v[5]))
        }),
    });

    checks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::run_check;

    #[test]
    fn composite_blocks_pass_finite_difference() {
        for check in composite_checks() {
            let out = run_check(&check, None);
            assert!(out.pass, "{}: max rel err {} > {}", out.name, out.max_rel_err, out.tol);
        }
    }
}
