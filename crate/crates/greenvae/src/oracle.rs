//! Independent reference computations used by the verification suites.
//! Nothing here shares code with the implementation paths it checks: the KL
//! oracle samples log-density ratios directly, the singular-value oracle
//! diagonalizes A^T A with cyclic Jacobi rotations instead of power
//! iteration, and the Fréchet oracle uses the diagonal closed form.

use rand_chacha::ChaCha8Rng;

use crate::rng::next_standard_normal;

/// Monte-Carlo KL(G(mean, var) || G(0,1)) for a one-dimensional Gaussian:
/// averages log q(z) - log p(z) over draws from q. 64-bit throughout.
pub fn mc_kl_1d(mean: f64, logvar: f64, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let var = logvar.exp();
    let std = var.sqrt();
    let mut acc = 0.0;
    for _ in 0..samples {
        let z = mean + std * next_standard_normal(rng);
        let log_q = -0.5 * ((z - mean) * (z - mean) / var) - 0.5 * (var).ln();
        let log_p = -0.5 * z * z;
        // The common -0.5 ln(2 pi) terms cancel.
        acc += log_q - log_p;
    }
    acc / samples as f64
}

/// Largest singular value of a general matrix a[m,n] via cyclic Jacobi
/// diagonalization of A^T A (independent of any power-method code).
pub fn top_singular_value(a: &[f64], m: usize, n: usize) -> f64 {
    assert_eq!(a.len(), m * n);
    // Gram matrix G = A^T A, n x n symmetric PSD.
    let mut g = vec![0.0f64; n * n];
    for row in a.chunks_exact(n) {
        for i in 0..n {
            for j in 0..n {
                g[i * n + j] += row[i] * row[j];
            }
        }
    }
    let eigs = jacobi_eigenvalues(&mut g, n);
    eigs.into_iter().fold(0.0f64, f64::max).max(0.0).sqrt()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi sweeps (destroys `g`).
pub fn jacobi_eigenvalues(g: &mut [f64], n: usize) -> Vec<f64> {
    assert_eq!(g.len(), n * n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += g[p * n + q] * g[p * n + q];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frob(g)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = g[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = g[p * n + p];
                let aqq = g[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cos = 1.0 / (t * t + 1.0).sqrt();
                let sin = t * cos;
                for i in 0..n {
                    let gip = g[i * n + p];
                    let giq = g[i * n + q];
                    g[i * n + p] = cos * gip - sin * giq;
                    g[i * n + q] = sin * gip + cos * giq;
                }
                for i in 0..n {
                    let gpi = g[p * n + i];
                    let gqi = g[q * n + i];
                    g[p * n + i] = cos * gpi - sin * gqi;
                    g[q * n + i] = sin * gpi + cos * gqi;
                }
            }
        }
    }
    (0..n).map(|i| g[i * n + i]).collect()
}

fn frob(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Squared Frobenius norm by direct elementwise summation.
pub fn frobenius_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// Closed-form Fréchet distance between diagonal Gaussians:
/// |m1-m2|^2 + sum_i (v1_i + v2_i - 2 sqrt(v1_i v2_i)).
pub fn frechet_diagonal(m1: &[f64], v1: &[f64], m2: &[f64], v2: &[f64]) -> f64 {
    assert!(m1.len() == m2.len() && v1.len() == v2.len() && m1.len() == v1.len());
    let mean_term: f64 = m1.iter().zip(m2).map(|(a, b)| (a - b) * (a - b)).sum();
    let trace_term: f64 = v1
        .iter()
        .zip(v2)
        .map(|(a, b)| a + b - 2.0 * (a * b).sqrt())
        .sum();
    mean_term + trace_term
}

/// Density estimate at a point from samples: counts within a centered bin of
/// width `h`, normalized to a density.
pub fn histogram_density_at(samples: &[f64], at: f64, h: f64) -> f64 {
    let count = samples
        .iter()
        .filter(|&&z| z >= at - h / 2.0 && z < at + h / 2.0)
        .count();
    count as f64 / (samples.len() as f64 * h)
}

/// Mean and per-dimension variance of a mixture with the given weights,
/// means[k][d] and diagonal variances[k][d].
pub fn mixture_moments(weights: &[f64], means: &[Vec<f64>], vars: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = means[0].len();
    let mut mean = vec![0.0; d];
    for (w, m) in weights.iter().zip(means) {
        for i in 0..d {
            mean[i] += w * m[i];
        }
    }
    let mut var = vec![0.0; d];
    for ((w, m), v) in weights.iter().zip(means).zip(vars) {
        for i in 0..d {
            let dm = m[i] - mean[i];
            var[i] += w * (v[i] + dm * dm);
        }
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // Symmetric matrix with eigenvalues 1 and 3: [[2,1],[1,2]]
        let mut g = vec![2.0, 1.0, 1.0, 2.0];
        let mut eig = jacobi_eigenvalues(&mut g, 2);
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((eig[0] - 1.0).abs() < 1e-12);
        assert!((eig[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn top_singular_of_diag() {
        let a = vec![3.0, 0.0, 0.0, 1.0];
        assert!((top_singular_value(&a, 2, 2) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn mc_kl_close_to_closed_form() {
        let mut rng = stream(5, "mc_kl_test");
        let (mean, logvar) = (0.8, -0.4);
        let mc = mc_kl_1d(mean, logvar, 200_000, &mut rng);
        let var: f64 = logvar.exp();
        let exact = 0.5 * (mean * mean + var - var.ln() - 1.0);
        assert!((mc - exact).abs() / exact < 0.02, "mc {mc} vs exact {exact}");
    }
}
