use super::denoiser::Denoiser;
use super::schedule::{posterior_mean, NoiseSchedule};
use crate::conditioning::Condition;
use crate::tensor::{Array, Binding, ParamStore, Rng, Var};

/// x0 predictor: noisy frames and a step index to per-frame estimates.
pub type Predictor<'a> = &'a mut dyn FnMut(&[Array<f32>], usize) -> Vec<Array<f32>>;
/// Per-step observer of the reverse chain.
pub type StepObserver<'a> = &'a mut dyn FnMut(usize, &[Array<f32>]);

/// Generated latent flow/occlusion sequence.
#[derive(Clone, Debug)]
pub struct FlowFieldSeq {
    /// per frame [2,h,w] normalized backward flow
    pub flows: Vec<Array<f32>>,
    /// per frame [1,h,w] occlusion in [0,1]
    pub occs: Vec<Array<f32>>,
}

/// Condition tokens materialized as plain arrays so the N-step sampler
/// can rebuild cheap tape constants every step.
#[derive(Clone, Debug)]
pub struct CondArrays {
    pub tokens_per_frame: Vec<Array<f32>>,
    pub z: Array<f32>,
}

impl CondArrays {
    pub fn from_condition(b: &Binding<'_, f32>, cond: &Condition) -> CondArrays {
        CondArrays {
            tokens_per_frame: cond
                .tokens_per_frame
                .iter()
                .map(|&v| b.tape.data(v).clone())
                .collect(),
            z: b.tape.data(cond.z).clone(),
        }
    }

    fn bind(&self, b: &mut Binding<'_, f32>) -> Condition {
        Condition {
            tokens_per_frame: self
                .tokens_per_frame
                .iter()
                .map(|a| b.tape.constant(a.clone()))
                .collect(),
            z: b.tape.constant(self.z.clone()),
            align_cls: None,
        }
    }
}

pub const X0_CLAMP: f32 = 2.0;

/// One reverse step: predict x0, clamp, form the posterior mean, add
/// fixed-variance noise (zero at the final step).
pub fn denoise_step(
    predict: Predictor<'_>,
    x_n: &[Array<f32>],
    n: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Vec<Array<f32>> {
    let mut x0 = predict(x_n, n);
    for f in x0.iter_mut() {
        for v in f.data.iter_mut() {
            *v = v.clamp(-X0_CLAMP, X0_CLAMP);
        }
    }
    let sigma = sched.sigma2(n).sqrt();
    x_n.iter()
        .zip(x0.iter())
        .map(|(xn, x0)| {
            let mut mu = posterior_mean(xn, x0, n, sched);
            if n > 1 {
                for v in mu.data.iter_mut() {
                    *v += (sigma * rng.normal()) as f32;
                }
            }
            mu
        })
        .collect()
}

/// Full reverse chain from pure noise with an arbitrary predictor
/// (tests inject oracles here).
pub fn sample_with(
    predict: Predictor<'_>,
    frames: usize,
    frame_shape: &[usize],
    sched: &NoiseSchedule,
    seed: u64,
    mut observer: Option<StepObserver<'_>>,
) -> Vec<Array<f32>> {
    let mut rng = Rng::derive(seed, "ddpm-sample");
    let numel: usize = frame_shape.iter().product();
    let mut x: Vec<Array<f32>> = (0..frames)
        .map(|_| Array::from_vec(frame_shape.to_vec(), rng.normal_vec(numel, 1.0)))
        .collect();
    for n in (1..=sched.n).rev() {
        x = denoise_step(predict, &x, n, sched, &mut rng);
        if let Some(obs) = observer.as_deref_mut() {
            obs(n - 1, &x);
        }
    }
    x
}

/// Split sampled states into flow fields and occlusion maps
/// (m = (m' + 1)/2, clamped into [0,1]).
pub fn split_states(states: &[Array<f32>]) -> FlowFieldSeq {
    let mut flows = Vec::with_capacity(states.len());
    let mut occs = Vec::with_capacity(states.len());
    for s in states {
        let (h, w) = (s.shape[1], s.shape[2]);
        let plane = h * w;
        flows.push(Array::from_vec(vec![2, h, w], s.data[..2 * plane].to_vec()));
        let occ: Vec<f32> =
            s.data[2 * plane..].iter().map(|&v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect();
        occs.push(Array::from_vec(vec![1, h, w], occ));
    }
    FlowFieldSeq { flows, occs }
}

/// Sample a flow/occlusion sequence from the trained denoiser under the
/// given condition.
pub fn sample_sequence(
    params: &ParamStore<f32>,
    denoiser: &Denoiser,
    cond: &CondArrays,
    sched: &NoiseSchedule,
    seed: u64,
    observer: Option<StepObserver<'_>>,
) -> FlowFieldSeq {
    let cfg = denoiser.cfg.clone();
    let mut predict = |x_n: &[Array<f32>], n: usize| -> Vec<Array<f32>> {
        let mut b = Binding::new_inference(params);
        let cond_vars = cond.bind(&mut b);
        let xv: Vec<Var> = x_n.iter().map(|a| b.tape.constant(a.clone())).collect();
        let out = denoiser.forward(&mut b, &xv, n, &cond_vars);
        out.into_iter().map(|v| b.tape.data(v).clone()).collect()
    };
    let states = sample_with(
        &mut predict,
        cfg.frames,
        &[3, cfg.latent, cfg.latent],
        sched,
        seed,
        observer,
    );
    split_states(&states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::make_schedule;
    use crate::tensor::mean_abs_diff;

    #[test]
    fn oracle_denoiser_converges_to_its_fixed_point() {
        let sched = make_schedule(100, 1e-4, 0.1);
        let target = Array::from_fn(vec![3, 4, 4], |i| ((i % 7) as f32 - 3.0) * 0.3);
        let t2 = target.clone();
        let mut oracle = move |x: &[Array<f32>], _n: usize| vec![t2.clone(); x.len()];
        let out = sample_with(&mut oracle, 2, &[3, 4, 4], &sched, 9, None);
        for f in &out {
            let err = mean_abs_diff(f, &target);
            assert!(err < 1e-2, "oracle sampling must converge: err {err}");
        }
    }

    #[test]
    fn final_step_returns_clamped_prediction_exactly() {
        let sched = make_schedule(10, 1e-3, 0.05);
        let pred = Array::from_fn(vec![3, 2, 2], |i| i as f32 - 5.0); // exceeds the clamp
        let p2 = pred.clone();
        let mut oracle = move |x: &[Array<f32>], _| vec![p2.clone(); x.len()];
        let x1 = vec![Array::from_fn(vec![3, 2, 2], |i| (i as f32) * 0.1)];
        let mut rng = Rng::from_seed(1);
        let out = denoise_step(&mut oracle, &x1, 1, &sched, &mut rng);
        let expected = pred.map(|v| v.clamp(-X0_CLAMP, X0_CLAMP));
        assert_eq!(out[0].data, expected.data, "n=1 must return the clamped x0 exactly");
    }

    #[test]
    fn same_seed_same_samples() {
        let sched = make_schedule(25, 1e-3, 0.08);
        let mut o1 = |x: &[Array<f32>], _: usize| x.to_vec();
        let a = sample_with(&mut o1, 2, &[3, 2, 2], &sched, 42, None);
        let mut o2 = |x: &[Array<f32>], _: usize| x.to_vec();
        let b = sample_with(&mut o2, 2, &[3, 2, 2], &sched, 42, None);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.data, y.data);
        }
    }

    #[test]
    fn split_states_keeps_occlusion_in_unit_interval() {
        let state = Array::from_fn(vec![3, 2, 2], |i| i as f32 - 6.0);
        let seq = split_states(&[state]);
        assert_eq!(seq.flows[0].shape, vec![2, 2, 2]);
        assert_eq!(seq.occs[0].shape, vec![1, 2, 2]);
        assert!(seq.occs[0].data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
