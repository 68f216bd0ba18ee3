use crate::tensor::{Array, Real};

/// Beta/alpha tables of the N-step forward chain, 1-indexed; position 0
/// holds the alpha-bar-0 = 1 convention.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub n: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear beta interpolation between the endpoints (inclusive).
pub fn make_schedule(n: usize, beta_min: f64, beta_max: f64) -> NoiseSchedule {
    assert!(n >= 1, "schedule needs at least one step");
    assert!(
        0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0,
        "invalid beta range [{beta_min}, {beta_max}]"
    );
    let mut beta = vec![0.0; n + 1];
    let mut alpha_bar = vec![0.0; n + 1];
    alpha_bar[0] = 1.0;
    for i in 1..=n {
        beta[i] = if n == 1 {
            beta_min
        } else {
            beta_min + (beta_max - beta_min) * (i - 1) as f64 / (n - 1) as f64
        };
        alpha_bar[i] = alpha_bar[i - 1] * (1.0 - beta[i]);
    }
    NoiseSchedule { n, beta, alpha_bar }
}

impl NoiseSchedule {
    fn check(&self, n: usize) {
        assert!(n >= 1 && n <= self.n, "step {n} out of range 1..={}", self.n);
    }

    pub fn beta(&self, n: usize) -> f64 {
        self.check(n);
        self.beta[n]
    }

    pub fn alpha(&self, n: usize) -> f64 {
        self.check(n);
        1.0 - self.beta[n]
    }

    pub fn alpha_bar(&self, n: usize) -> f64 {
        assert!(n <= self.n, "step {n} out of range 0..={}", self.n);
        self.alpha_bar[n]
    }

    /// Posterior variance beta-tilde_n; exactly zero at n = 1.
    pub fn sigma2(&self, n: usize) -> f64 {
        self.check(n);
        (1.0 - self.alpha_bar[n - 1]) / (1.0 - self.alpha_bar[n]) * self.beta[n]
    }
}

/// Closed-form forward marginal: x_n = sqrt(abar_n) x0 + sqrt(1-abar_n) eps.
pub fn q_sample<T: Real>(x0: &Array<T>, n: usize, eps: &Array<T>, sched: &NoiseSchedule) -> Array<T> {
    assert_eq!(x0.shape, eps.shape, "q_sample noise must match x0 shape");
    let a = T::from_f64(sched.alpha_bar(n).sqrt());
    let s = T::from_f64((1.0 - sched.alpha_bar(n)).sqrt());
    Array {
        shape: x0.shape.clone(),
        data: x0.data.iter().zip(eps.data.iter()).map(|(&x, &e)| a * x + s * e).collect(),
    }
}

/// Posterior mean of q(x_{n-1} | x_n, x0-hat):
/// [sqrt(a_n)(1-abar_{n-1}) x_n + sqrt(abar_{n-1})(1-a_n) x0] / (1-abar_n).
pub fn posterior_mean<T: Real>(
    x_n: &Array<T>,
    x0_hat: &Array<T>,
    n: usize,
    sched: &NoiseSchedule,
) -> Array<T> {
    assert_eq!(x_n.shape, x0_hat.shape, "posterior_mean shape mismatch");
    let a_n = sched.alpha(n);
    let ab_prev = sched.alpha_bar(n - 1);
    let ab_n = sched.alpha_bar(n);
    let c_xn = T::from_f64(a_n.sqrt() * (1.0 - ab_prev) / (1.0 - ab_n));
    let c_x0 = T::from_f64(ab_prev.sqrt() * (1.0 - a_n) / (1.0 - ab_n));
    Array {
        shape: x_n.shape.clone(),
        data: x_n
            .data
            .iter()
            .zip(x0_hat.data.iter())
            .map(|(&xn, &x0)| c_xn * xn + c_x0 * x0)
            .collect(),
    }
}
