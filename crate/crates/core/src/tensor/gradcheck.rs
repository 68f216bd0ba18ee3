//! Central finite-difference verification of every differentiable op.
//!
//! Each check builds a small graph in f64, projects the output against
//! a fixed random direction to get a scalar, and compares the tape
//! gradients of the designated inputs with central differences.

use super::array::Array;
use super::params::{Binding, ParamStore};

use super::rng::Rng;
use super::tape::{Tape, Var};

/// Differentiable op kinds the tape implements; the gradcheck registry
/// must cover every one of them.
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "matmul",
    "transpose",
    "softmax",
    "log_softmax",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "ln",
    "sum",
    "mean",
    "mean_rows",
    "add_row_broadcast",
    "add_channel_bias",
    "mul_channel_broadcast",
    "concat0",
    "slice0",
    "concat_cols",
    "slice_cols",
    "reshape",
    "gather_rows",
    "conv2d",
    "upsample2x",
    "grid_sample",
    "layer_norm",
];

type BuildFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var + Send + Sync>;

pub struct Check {
    pub name: &'static str,
    /// Op kinds this check exercises.
    pub covers: &'static [&'static str],
    pub tol: f64,
    pub inputs: Vec<Array<f64>>,
    /// Which inputs are differentiated (others enter as constants).
    pub diff_mask: Vec<bool>,
    pub build: BuildFn,
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub covers: Vec<&'static str>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(0.01)
}

/// Finite-difference step; in f64 the truncation and rounding error are
/// both far below the pass tolerances.
pub const FD_STEP: f64 = 1e-4;

#[allow(clippy::needless_range_loop)]
pub fn run_check(check: &Check, corrupt: Option<&str>) -> CheckOutcome {
    // Fixed projection direction so the scalar loss exercises the whole
    // output jacobian.
    let mut tape: Tape<f64> = Tape::new();
    let vars: Vec<Var> = check
        .inputs
        .iter()
        .zip(check.diff_mask.iter())
        .map(|(a, &diff)| if diff { tape.leaf(a.clone()) } else { tape.constant(a.clone()) })
        .collect();
    let out = (check.build)(&mut tape, &vars);
    let mut rng = Rng::derive(0xC0FFEE, check.name);
    let proj = Array::from_vec(tape.shape(out).to_vec(), rng.normal_vec(tape.data(out).numel(), 1.0));
    let pv = tape.constant(proj.clone());
    let prod = tape.mul(out, pv);
    let loss = tape.sum(prod);
    tape.backward(loss);
    let mut analytic: Vec<Vec<f64>> = vars.iter().map(|v| tape.grad(*v)).collect();

    if corrupt == Some(check.name) {
        // Test hook: a deliberately wrong gradient must trip the check.
        if let Some(first) = analytic.iter_mut().find(|g| !g.is_empty()) {
            first[0] += 0.05 * (1.0 + first[0].abs());
        }
    }

    let eval = |inputs: &[Array<f64>]| -> f64 {
        let mut t: Tape<f64> = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|a| t.constant(a.clone())).collect();
        let o = (check.build)(&mut t, &vs);
        let pv = t.constant(proj.clone());
        let p = t.mul(o, pv);
        let l = t.sum(p);
        t.value(l)
    };

    let mut max_err = 0.0f64;
    let mut work = check.inputs.clone();
    for (pi, diff) in check.diff_mask.iter().enumerate() {
        if !diff {
            continue;
        }
        for ei in 0..work[pi].numel() {
            let orig = work[pi].data[ei];
            work[pi].data[ei] = orig + FD_STEP;
            let fp = eval(&work);
            work[pi].data[ei] = orig - FD_STEP;
            let fm = eval(&work);
            work[pi].data[ei] = orig;
            let fd = (fp - fm) / (2.0 * FD_STEP);
            let err = rel_err(analytic[pi][ei], fd);
            if err > max_err {
                max_err = err;
            }
        }
    }
    CheckOutcome {
        name: check.name,
        covers: check.covers.to_vec(),
        max_rel_err: max_err,
        tol: check.tol,
        pass: max_err < check.tol,
    }
}

/// Whole-model finite-difference check: analytic gradients of the bound
/// parameters and data inputs versus central differences obtained by
/// perturbing store entries and re-running the forward. Returns the max
/// relative error. `forward` must produce a scalar loss.
#[allow(clippy::needless_range_loop)]
pub fn fd_check_store(
    store: &ParamStore<f64>,
    param_subset: &[&str],
    inputs: &[Array<f64>],
    forward: &dyn Fn(&mut Binding<f64>, &[Var]) -> Var,
) -> f64 {
    let mut b = Binding::new(store);
    let vars: Vec<Var> = inputs.iter().map(|a| b.tape.leaf(a.clone())).collect();
    let loss = forward(&mut b, &vars);
    b.tape.backward(loss);
    let input_grads: Vec<Vec<f64>> = vars.iter().map(|v| b.tape.grad(*v)).collect();
    let param_grads = b.take_grads();

    let eval = |store: &ParamStore<f64>, inputs: &[Array<f64>]| -> f64 {
        let mut b = Binding::new(store);
        let vars: Vec<Var> = inputs.iter().map(|a| b.tape.constant(a.clone())).collect();
        let loss = forward(&mut b, &vars);
        b.tape.value(loss)
    };

    let mut max_err = 0.0f64;
    for name in param_subset {
        let grads = param_grads
            .get(*name)
            .unwrap_or_else(|| panic!("no gradient recorded for parameter {name}"));
        let n = store.get(name).numel();
        for ei in 0..n {
            let mut s2 = store.clone();
            s2.get_mut(name).data[ei] += FD_STEP;
            let fp = eval(&s2, inputs);
            s2.get_mut(name).data[ei] -= 2.0 * FD_STEP;
            let fm = eval(&s2, inputs);
            let fd = (fp - fm) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(grads[ei], fd));
        }
    }
    let mut work = inputs.to_vec();
    for (pi, g) in input_grads.iter().enumerate() {
        for ei in 0..work[pi].numel() {
            let orig = work[pi].data[ei];
            work[pi].data[ei] = orig + FD_STEP;
            let fp = eval(store, &work);
            work[pi].data[ei] = orig - FD_STEP;
            let fm = eval(store, &work);
            work[pi].data[ei] = orig;
            let fd = (fp - fm) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(g[ei], fd));
        }
    }
    max_err
}

/// A named whole-model check for the gradcheck report.
pub struct CustomCheck {
    pub name: &'static str,
    pub tol: f64,
    pub run: Box<dyn Fn() -> f64 + Send + Sync>,
}

impl CustomCheck {
    pub fn outcome(&self) -> CheckOutcome {
        let err = (self.run)();
        CheckOutcome {
            name: self.name,
            covers: Vec::new(),
            max_rel_err: err,
            tol: self.tol,
            pass: err < self.tol,
        }
    }
}

fn arr(shape: &[usize], rng: &mut Rng, std: f64) -> Array<f64> {
    Array::from_vec(shape.to_vec(), rng.normal_vec(shape.iter().product(), std))
}

/// Random values bounded away from zero, for kinked ops like relu.
fn arr_away_from_zero(shape: &[usize], rng: &mut Rng) -> Array<f64> {
    Array::from_fn(shape.to_vec(), |_| {
        let v = rng.uniform_in(0.1, 1.0);
        if rng.uniform() < 0.5 {
            -v
        } else {
            v
        }
    })
}

/// Flow values whose sample points stay away from the pixel lattice and
/// the borders, where bilinear interpolation is not differentiable.
fn safe_flow(h: usize, w: usize, rng: &mut Rng) -> Array<f64> {
    let mut data = vec![0.0f64; 2 * h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            // target px in [0.25, w-1.75] with fractional part in [0.25, 0.75]
            let tx = rng.below(w.max(2) - 1) as f64 + rng.uniform_in(0.3, 0.7);
            let ty = rng.below(h.max(2) - 1) as f64 + rng.uniform_in(0.3, 0.7);
            data[i] = (tx - x as f64) * 2.0 / (w as f64 - 1.0);
            data[h * w + i] = (ty - y as f64) * 2.0 / (h as f64 - 1.0);
        }
    }
    Array::from_vec(vec![2, h, w], data)
}

/// The registry of per-op finite-difference checks.
pub fn basic_checks() -> Vec<Check> {
    let mut rng = Rng::from_seed(0x5EED);
    let mut checks: Vec<Check> = Vec::new();

    checks.push(Check {
        name: "add",
        covers: &["add"],
        tol: 1e-4,
        inputs: vec![arr(&[3, 4], &mut rng, 1.0), arr(&[3, 4], &mut rng, 1.0)],
        diff_mask: vec![true, true],
        build: Box::new(|t, v| t.add(v[0], v[1])),
    });
    checks.push(Check {
        name: "sub",
        covers: &["sub"],
        tol: 1e-4,
        inputs: vec![arr(&[3, 4], &mut rng, 1.0), arr(&[3, 4], &mut rng, 1.0)],
        diff_mask: vec![true, true],
        build: Box::new(|t, v| t.sub(v[0], v[1])),
    });
    checks.push(Check {
        name: "mul",
        covers: &["mul"],
        tol: 1e-4,
        inputs: vec![arr(&[3, 4], &mut rng, 1.0), arr(&[3, 4], &mut rng, 1.0)],
        diff_mask: vec![true, true],
        build: Box::new(|t, v| t.mul(v[0], v[1])),
    });
    checks.push(Check {
        name: "scale",
        covers: &["scale"],
        tol: 1e-4,
        inputs: vec![arr(&[2, 5], &mut rng, 1.0)],
        diff_mask: vec![true],
        build: Box::new(|t, v| t.scale(v[0], -1.7)),
    });
    checks.push(Check {
        name: "add_scalar",
        covers: &["add_scalar"],
        tol: 1e-4,
        inputs: vec![arr(&[2, 5], &mut rng, 1.0)],
        diff_mask: vec![true],
        build: Box::new(|t, v| t.add_scalar(v[0], 0.37)),
    });
    checks.push(Check {
        name: "matmul",
        covers: &["matmul"],
        tol: 1e-4,
        inputs: vec![arr(&[3, 4], &mut rng, 1.0), arr(&[4, 2], &mut rng, 1.0)],
        diff_mask: vec![true, true],
        build: Box::new(|t, v| t.matmul(v[0], v[1])),
    });
    checks.push(Check {
        name: "transpose",
        covers: &["transpose"],
        tol: 1e-4,
        inputs: vec![arr(&[3, 5], &mut rng, 1.0)],
        diff_mask: vec![true],
        build: Box::new(|t, v| t.transpose(v[0])),
    });
    checks.push(Check {
        name: "softmax",
        covers: &["softmax"],
        tol: 1e-4,
        inputs: vec![arr(&[2, 5], &mut rng, 1.5)],
        diff_mask: vec![true],
        build: Box::new(|t, v| t.softmax(v[0], 1)),
    });
    checks.push(Check {
        name: "softmax_axis0",
        covers: &["softmax"],
        tol: 1e-4,
        inputs: vec![arr(&[4, 3], &mut rng, 1.5)],
        diff_mask: vec![true],
        build: Box::new(|t, v| t.softmax(v[0], 0)),
    });
    checks.push(Check {
        name: "log_softmax",
        covers: &["log_softmax"],
        tol: 1e-4,
        inputs: vec![arr(&[2, 5], &mut rng, 1.5)],
        diff_mask: vec![true],
        build: Box::new(|t, v| t.log_softmax(v[0], 1)),
    });
    checks.push(Check {
        name: "relu",
        covers: &["relu"],
        tol: 1e-4,
        inputs: vec![arr_away_from_zero(&[3, 4], &mut rng)],
        diff_mask: vec![true],
        build: Box::new(|t, v| t.relu(v[0])),
    });
    checks.push(Check {
        name: "sigmoid",
        covers: &["sigmoid"],
        tol: 1e-4,
        inputs: vec![arr(&[3, 4], &mut rng, 1.5)],
        diff_mask: vec![true],
        build: Box::new(|t, v| t.sigmoid(v[0])),
    });
    checks.push(Check {
        name: "tanh",
        covers: &["tanh"],
        tol: 1e-4,
        inputs: vec![arr(&[3, 4], &mut rng, 1.5)],
        diff_mask: vec![true],
        build: Box::new(|t, v| t.tanh(v[0])),
    });
    checks.push(Check {
        name: "exp",
        covers: &["exp"],
        tol: 1e-4,
        inputs: vec![arr(&[3, 4], &mut rng, 0.8)],
        diff_mask: vec![true],
        build: Box::new(|t, v| t.exp(v[0])),
    });
    checks.push(Check {
        name: "ln",
        covers: &["ln"],
        tol: 1e-4,
        inputs: vec![Array::from_fn(vec![3, 4], {
            let mut r = Rng::derive(0x5EED, "ln-inputs");
            move |_| r.uniform_in(0.4, 2.5)
        })],
        diff_mask: vec![true],
        build: Box::new(|t, v| t.ln(v[0])),
    });
    checks.push(Check {
        name: "sum",
        covers: &["sum"],
        tol: 1e-4,
        inputs: vec![arr(&[4, 3], &mut rng, 1.0)],
        diff_mask: vec![true],
        build: Box::new(|t, v| t.sum(v[0])),
    });
    checks.push(Check {
        name: "mean",
        covers: &["mean"],
        tol: 1e-4,
        inputs: vec![arr(&[4, 3], &mut rng, 1.0)],
        diff_mask: vec![true],
        build: Box::new(|t, v| t.mean(v[0])),
    });
    checks.push(Check {
        name: "mean_rows",
        covers: &["mean_rows"],
        tol: 1e-4,
        inputs: vec![arr(&[4, 3], &mut rng, 1.0)],
        diff_mask: vec![true],
        build: Box::new(|t, v| t.mean_rows(v[0])),
    });
    checks.push(Check {
        name: "add_row_broadcast",
        covers: &["add_row_broadcast"],
        tol: 1e-4,
        inputs: vec![arr(&[3, 4], &mut rng, 1.0), arr(&[4], &mut rng, 1.0)],
        diff_mask: vec![true, true],
        build: Box::new(|t, v| t.add_row_broadcast(v[0], v[1])),
    });
    checks.push(Check {
        name: "add_channel_bias",
        covers: &["add_channel_bias"],
        tol: 1e-4,
        inputs: vec![arr(&[2, 3, 3], &mut rng, 1.0), arr(&[2], &mut rng, 1.0)],
        diff_mask: vec![true, true],
        build: Box::new(|t, v| t.add_channel_bias(v[0], v[1])),
    });
    checks.push(Check {
        name: "mul_channel_broadcast",
        covers: &["mul_channel_broadcast"],
        tol: 1e-4,
        inputs: vec![arr(&[3, 4, 4], &mut rng, 1.0), arr(&[1, 4, 4], &mut rng, 1.0)],
        diff_mask: vec![true, true],
        build: Box::new(|t, v| t.mul_channel_broadcast(v[0], v[1])),
    });
    checks.push(Check {
        name: "concat0",
        covers: &["concat0"],
        tol: 1e-4,
        inputs: vec![arr(&[2, 3], &mut rng, 1.0), arr(&[4, 3], &mut rng, 1.0)],
        diff_mask: vec![true, true],
        build: Box::new(|t, v| t.concat0(v[0], v[1])),
    });
    checks.push(Check {
        name: "slice0",
        covers: &["slice0"],
        tol: 1e-4,
        inputs: vec![arr(&[5, 3], &mut rng, 1.0)],
        diff_mask: vec![true],
        build: Box::new(|t, v| t.slice0(v[0], 1, 3)),
    });
    checks.push(Check {
        name: "concat_cols",
        covers: &["concat_cols"],
        tol: 1e-4,
        inputs: vec![arr(&[3, 2], &mut rng, 1.0), arr(&[3, 4], &mut rng, 1.0)],
        diff_mask: vec![true, true],
        build: Box::new(|t, v| t.concat_cols(v[0], v[1])),
    });
    checks.push(Check {
        name: "slice_cols",
        covers: &["slice_cols"],
        tol: 1e-4,
        inputs: vec![arr(&[3, 6], &mut rng, 1.0)],
        diff_mask: vec![true],
        build: Box::new(|t, v| t.slice_cols(v[0], 2, 3)),
    });
    checks.push(Check {
        name: "reshape",
        covers: &["reshape"],
        tol: 1e-4,
        inputs: vec![arr(&[2, 6], &mut rng, 1.0)],
        diff_mask: vec![true],
        build: Box::new(|t, v| t.reshape(v[0], vec![3, 4])),
    });
    checks.push(Check {
        name: "gather_rows",
        covers: &["gather_rows"],
        tol: 1e-4,
        inputs: vec![arr(&[4, 3], &mut rng, 1.0)],
        diff_mask: vec![true],
        build: Box::new(|t, v| t.gather_rows(v[0], vec![0, 2, 1, 2, 3])),
    });
    checks.push(Check {
        name: "conv2d",
        covers: &["conv2d"],
        tol: 1e-4,
        inputs: vec![arr(&[2, 5, 6], &mut rng, 1.0), arr(&[3, 2, 3, 3], &mut rng, 0.5)],
        diff_mask: vec![true, true],
        build: Box::new(|t, v| t.conv2d(v[0], v[1], 1, 1)),
    });
    checks.push(Check {
        name: "conv2d_strided",
        covers: &["conv2d"],
        tol: 1e-4,
        inputs: vec![arr(&[2, 6, 6], &mut rng, 1.0), arr(&[2, 2, 3, 3], &mut rng, 0.5)],
        diff_mask: vec![true, true],
        build: Box::new(|t, v| t.conv2d(v[0], v[1], 2, 1)),
    });
    checks.push(Check {
        name: "upsample2x",
        covers: &["upsample2x"],
        tol: 1e-4,
        inputs: vec![arr(&[2, 3, 2], &mut rng, 1.0)],
        diff_mask: vec![true],
        build: Box::new(|t, v| t.upsample2x(v[0])),
    });
    let gs_h = 6;
    let gs_w = 5;
    checks.push(Check {
        name: "grid_sample_src",
        covers: &["grid_sample"],
        tol: 1e-4,
        inputs: vec![arr(&[2, gs_h, gs_w], &mut rng, 1.0), {
            let mut r = Rng::derive(0x5EED, "gs-src-flow");
            safe_flow(gs_h, gs_w, &mut r)
        }],
        diff_mask: vec![true, false],
        build: Box::new(|t, v| t.grid_sample(v[0], v[1])),
    });
    checks.push(Check {
        name: "grid_sample_flow",
        covers: &["grid_sample"],
        tol: 1e-3,
        inputs: vec![arr(&[2, gs_h, gs_w], &mut rng, 1.0), {
            let mut r = Rng::derive(0x5EED, "gs-flow-flow");
            safe_flow(gs_h, gs_w, &mut r)
        }],
        diff_mask: vec![false, true],
        build: Box::new(|t, v| t.grid_sample(v[0], v[1])),
    });
    checks.push(Check {
        name: "layer_norm",
        covers: &["layer_norm"],
        tol: 1e-4,
        inputs: vec![
            arr(&[3, 5], &mut rng, 1.0),
            arr(&[5], &mut rng, 0.5),
            arr(&[5], &mut rng, 0.5),
        ],
        diff_mask: vec![true, true, true],
        build: Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
    });
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_basic_check_passes() {
        for check in basic_checks() {
            let out = run_check(&check, None);
            assert!(
                out.pass,
                "{}: max rel err {} exceeds tol {}",
                out.name, out.max_rel_err, out.tol
            );
        }
    }

    #[test]
    fn registry_covers_every_differentiable_op() {
        let checks = basic_checks();
        for op in DIFFERENTIABLE_OPS {
            assert!(
                checks.iter().any(|c| c.covers.contains(op)),
                "no gradcheck registered for op {op}"
            );
        }
    }

    #[test]
    fn corruption_hook_trips_the_check() {
        let checks = basic_checks();
        let matmul = checks.iter().find(|c| c.name == "matmul").unwrap();
        let out = run_check(matmul, Some("matmul"));
        assert!(!out.pass, "corrupted matmul gradient must fail the check");
    }
}
