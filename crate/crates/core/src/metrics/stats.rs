//! Gaussian moment fitting and the Fréchet distance between fitted
//! Gaussians, with the matrix square root computed by Jacobi
//! eigendecomposition of the symmetrized covariance product.

use super::EvalError;

#[derive(Clone, Debug)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// row-major D x D, symmetric, regularized by +1e-6 I
    pub cov: Vec<f64>,
    pub dim: usize,
}

pub const COV_REGULARIZER: f64 = 1e-6;

/// Sample mean and unbiased sample covariance of feature rows.
pub fn gaussian_stats(rows: &[Vec<f32>]) -> Result<GaussianStats, EvalError> {
    if rows.len() < 2 {
        return Err(EvalError::TooFewClips(rows.len()));
    }
    let d = rows[0].len();
    let m = rows.len() as f64;
    let mut mean = vec![0.0f64; d];
    for r in rows {
        assert_eq!(r.len(), d, "feature rows must share one dimension");
        for (acc, &v) in mean.iter_mut().zip(r.iter()) {
            *acc += v as f64;
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    let mut cov = vec![0.0f64; d * d];
    for r in rows {
        for i in 0..d {
            let di = r[i] as f64 - mean[i];
            for j in 0..d {
                cov[i * d + j] += di * (r[j] as f64 - mean[j]);
            }
        }
    }
    for (idx, v) in cov.iter_mut().enumerate() {
        *v /= m - 1.0;
        if idx % (d + 1) == 0 {
            *v += COV_REGULARIZER;
        }
    }
    if mean.iter().any(|v| !v.is_finite()) || cov.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    Ok(GaussianStats { mean, cov, dim: d })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues and the orthogonal matrix whose columns are the
/// eigenvectors (row-major).
pub fn jacobi_eigh(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut q = vec![0.0f64; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    let fro: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() < 1e-14 * fro {
            break;
        }
        for p in 0..n {
            for r in p + 1..n {
                let apq = m[p * n + r];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[r * n + r];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + r];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + r] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[r * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[r * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let qkp = q[k * n + p];
                    let qkq = q[k * n + r];
                    q[k * n + p] = c * qkp - s * qkq;
                    q[k * n + r] = s * qkp + c * qkq;
                }
            }
        }
    }
    let eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    (eig, q)
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0f64; n * n];
    for i in 0..n {
        for k in 0..n {
            let av = a[i * n + k];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += av * b[k * n + j];
            }
        }
    }
    c
}

/// Square root of the symmetrized product sym(A B): eigendecompose,
/// clip negative eigenvalues to zero, rebuild.
pub fn sqrtm_sym_product(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let ab = matmul(a, b, n);
    let mut sym = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = 0.5 * (ab[i * n + j] + ab[j * n + i]);
        }
    }
    let (eig, q) = jacobi_eigh(&sym, n);
    let mut out = vec![0.0f64; n * n];
    for k in 0..n {
        let l = eig[k].max(0.0).sqrt();
        if l == 0.0 {
            continue;
        }
        for i in 0..n {
            let qi = q[i * n + k] * l;
            for j in 0..n {
                out[i * n + j] += qi * q[j * n + k];
            }
        }
    }
    out
}

/// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 sqrt(sym(Sa Sb))).
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64, EvalError> {
    if a.dim != b.dim {
        return Err(EvalError::DimMismatch { a: a.dim, b: b.dim });
    }
    let n = a.dim;
    let ok = a.mean.iter().chain(&a.cov).chain(&b.mean).chain(&b.cov).all(|v| v.is_finite());
    if !ok {
        return Err(EvalError::NonFinite);
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let root = sqrtm_sym_product(&a.cov, &b.cov, n);
    let mut trace = 0.0;
    for i in 0..n {
        trace += a.cov[i * n + i] + b.cov[i * n + i] - 2.0 * root[i * n + i];
    }
    Ok(mean_term + trace)
}

impl GaussianStats {
    /// Analytic 1-D Gaussian, for closed-form checks.
    pub fn one_dimensional(mean: f64, var: f64) -> GaussianStats {
        GaussianStats { mean: vec![mean], cov: vec![var], dim: 1 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn hand_computed_two_point_stats() {
        // rows {(0,0),(2,2)}: mean (1,1), unbiased cov [[2,2],[2,2]]
        let rows = vec![vec![0.0f32, 0.0], vec![2.0, 2.0]];
        let s = gaussian_stats(&rows).unwrap();
        assert_eq!(s.mean, vec![1.0, 1.0]);
        for (i, want) in [2.0, 2.0, 2.0, 2.0].iter().enumerate() {
            let reg = if i % 3 == 0 { COV_REGULARIZER } else { 0.0 };
            assert!((s.cov[i] - want - reg).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_zero_covariance_pre_regularization() {
        let rows = vec![vec![1.5f32, -0.5], vec![1.5, -0.5]];
        let s = gaussian_stats(&rows).unwrap();
        assert!((s.cov[0] - COV_REGULARIZER).abs() < 1e-12);
        assert!(s.cov[1].abs() < 1e-12);
    }

    #[test]
    fn sample_mean_concentrates() {
        let mut rng = Rng::from_seed(100);
        let rows: Vec<Vec<f32>> =
            (0..100_000).map(|_| vec![rng.normal() as f32, rng.normal() as f32]).collect();
        let s = gaussian_stats(&rows).unwrap();
        assert!(s.mean[0].abs() < 0.02 && s.mean[1].abs() < 0.02, "mean {:?}", s.mean);
    }

    #[test]
    fn too_few_rows_rejected() {
        assert!(matches!(gaussian_stats(&[vec![1.0f32]]), Err(EvalError::TooFewClips(1))));
    }

    #[test]
    fn jacobi_recovers_diagonal() {
        let a = vec![3.0, 0.0, 0.0, -1.0];
        let (mut eig, _) = jacobi_eigh(&a, 2);
        eig.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert!((eig[0] + 1.0).abs() < 1e-12 && (eig[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn matrix_root_squares_back_to_symmetrized_product() {
        let mut rng = Rng::from_seed(7);
        for n in [4usize, 16, 64] {
            // well-conditioned SPD pair
            let mut make = |shift: f64| -> Vec<f64> {
                let c: Vec<f64> = rng.normal_vec(n * n, 1.0);
                let mut m = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for k in 0..n {
                            acc += c[i * n + k] * c[j * n + k];
                        }
                        m[i * n + j] = acc / n as f64 + if i == j { shift } else { 0.0 };
                    }
                }
                m
            };
            let a = make(0.5);
            let b = make(0.5);
            let r = sqrtm_sym_product(&a, &b, n);
            let rr = matmul(&r, &r, n);
            let ab = matmul(&a, &b, n);
            let mut err = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let sym = 0.5 * (ab[i * n + j] + ab[j * n + i]);
                    err += (rr[i * n + j] - sym) * (rr[i * n + j] - sym);
                }
            }
            assert!(err.sqrt() < 1e-6, "n={n}: Frobenius error {}", err.sqrt());
        }
    }

    #[test]
    fn frechet_identity_symmetry_and_closed_forms() {
        let a = GaussianStats::one_dimensional(0.0, 1.0);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
        // N(0,1) vs N(3,1): (3)^2 + 0 = 9
        let b = GaussianStats::one_dimensional(3.0, 1.0);
        assert!((frechet_distance(&a, &b).unwrap() - 9.0).abs() < 1e-8);
        assert_eq!(
            frechet_distance(&a, &b).unwrap(),
            frechet_distance(&b, &a).unwrap()
        );
        // N(0,1) vs N(0,4): (sigma diff)^2 = 1
        let c = GaussianStats::one_dimensional(0.0, 4.0);
        assert!((frechet_distance(&a, &c).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn frechet_from_samples_matches_closed_form_within_two_percent() {
        let mut rng = Rng::from_seed(0xF1D);
        let draws = 100_000;
        let xa: Vec<Vec<f32>> = (0..draws).map(|_| vec![rng.normal() as f32]).collect();
        let xb: Vec<Vec<f32>> = (0..draws).map(|_| vec![(rng.normal() + 3.0) as f32]).collect();
        let sa = gaussian_stats(&xa).unwrap();
        let sb = gaussian_stats(&xb).unwrap();
        let d = frechet_distance(&sa, &sb).unwrap();
        assert!((d - 9.0).abs() < 0.02 * 9.0, "sampled frechet {d} vs 9");
    }
}
