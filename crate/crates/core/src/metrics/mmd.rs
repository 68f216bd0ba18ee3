//! Unbiased squared maximum mean discrepancy with a degree-3 polynomial
//! kernel k(x,y) = (x.y/D + 1)^3.

use super::EvalError;

pub fn poly_kernel(x: &[f32], y: &[f32]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y.iter()).map(|(&a, &b)| a as f64 * b as f64).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased MMD^2 estimator (diagonal terms excluded from the
/// within-sample sums).
pub fn kernel_distance(fa: &[Vec<f32>], fb: &[Vec<f32>]) -> Result<f64, EvalError> {
    let m = fa.len();
    let n = fb.len();
    if m < 2 || n < 2 {
        return Err(EvalError::TooFewClips(m.min(n)));
    }
    let mut kxx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kxx += poly_kernel(&fa[i], &fa[j]);
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kyy += poly_kernel(&fb[i], &fb[j]);
            }
        }
    }
    // canonical iteration order for the cross term so the estimator is
    // bitwise symmetric in its arguments
    let swap = match m.cmp(&n) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => {
            let fa_flat = fa.iter().flatten();
            let fb_flat = fb.iter().flatten();
            fa_flat.partial_cmp(fb_flat) == Some(std::cmp::Ordering::Greater)
        }
    };
    let (xs, ys) = if swap { (fb, fa) } else { (fa, fb) };
    let mut kxy = 0.0;
    for x in xs {
        for y in ys {
            kxy += poly_kernel(x, y);
        }
    }
    Ok(kxx / (m * (m - 1)) as f64 + kyy / (n * (n - 1)) as f64 - 2.0 * kxy / (m * n) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn sample(rng: &mut Rng, n: usize, d: usize, shift: f64) -> Vec<Vec<f32>> {
        (0..n).map(|_| (0..d).map(|_| (rng.normal() + shift) as f32).collect()).collect()
    }

    #[test]
    fn estimator_is_exactly_symmetric() {
        let mut rng = Rng::from_seed(1);
        let a = sample(&mut rng, 20, 8, 0.0);
        let b = sample(&mut rng, 24, 8, 0.4);
        assert_eq!(kernel_distance(&a, &b).unwrap(), kernel_distance(&b, &a).unwrap());
    }

    #[test]
    fn separated_point_masses_give_large_positive_value() {
        let a = vec![vec![0.0f32; 8]; 10];
        let mut b = vec![vec![0.0f32; 8]; 10];
        for r in b.iter_mut() {
            r[0] = 10.0;
        }
        let d = kernel_distance(&a, &b).unwrap();
        assert!(d > 100.0, "separated masses must give a large MMD, got {d}");
    }

    /// Bootstrap standard error of the estimator under resampling.
    fn bootstrap_se(a: &[Vec<f32>], b: &[Vec<f32>], reps: usize, rng: &mut Rng) -> f64 {
        let mut vals = Vec::with_capacity(reps);
        for _ in 0..reps {
            let ra: Vec<Vec<f32>> = (0..a.len()).map(|_| a[rng.below(a.len())].clone()).collect();
            let rb: Vec<Vec<f32>> = (0..b.len()).map(|_| b[rng.below(b.len())].clone()).collect();
            vals.push(kernel_distance(&ra, &rb).unwrap());
        }
        let mean = vals.iter().sum::<f64>() / reps as f64;
        (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps - 1) as f64).sqrt()
    }

    #[test]
    fn same_rows_split_identically_is_within_three_standard_errors() {
        // one sample matrix deterministically split into two halves
        let mut rng = Rng::from_seed(2);
        let rows = sample(&mut rng, 96, 16, 0.0);
        let (a, b) = rows.split_at(48);
        let d = kernel_distance(a, b).unwrap();
        let se = bootstrap_se(a, b, 200, &mut rng);
        assert!(d.abs() < 3.0 * se, "|{d}| must be within 3 bootstrap SEs ({se})");
    }

    #[test]
    fn independent_draws_from_same_distribution_are_near_zero() {
        let mut rng = Rng::from_seed(3);
        let a = sample(&mut rng, 64, 16, 0.0);
        let b = sample(&mut rng, 64, 16, 0.0);
        let d = kernel_distance(&a, &b).unwrap();
        let se = bootstrap_se(&a, &b, 200, &mut rng);
        assert!(d.abs() < 3.0 * se, "|{d}| must be within 3 bootstrap SEs ({se})");
    }
}
