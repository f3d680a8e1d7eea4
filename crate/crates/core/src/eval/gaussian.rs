//! Gaussian summaries and the Fréchet (2-Wasserstein) distance between them.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues above this (negative) floor are treated as round-off and clamped to zero.
pub const EIGEN_CLAMP: f64 = -1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianSummary {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>, count: usize) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::shape(
                format!("{0}x{0} covariance", mean.len()),
                format!("{}x{}", cov.nrows(), cov.ncols()),
            ));
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov: sym,
            count,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance.
pub fn fit_gaussian(samples: &[Vec<f64>]) -> Result<GaussianSummary> {
    if samples.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 samples, got {}",
            samples.len()
        )));
    }
    let d = samples[0].len();
    if let Some(bad) = samples.iter().find(|s| s.len() != d) {
        return Err(Error::shape(d, bad.len()));
    }
    let n = samples.len();
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = DVector::<f64>::zeros(d);
    for s in samples {
        for (k, (x, m)) in s.iter().zip(&mean).enumerate() {
            centered[k] = x - m;
        }
        cov.ger(1.0, &centered, &centered, 1.0);
    }
    cov /= (n - 1) as f64;
    GaussianSummary::new(mean, cov, n)
}

/// Symmetric PSD square root by eigendecomposition.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| if l < 0.0 { 0.0 } else { l.sqrt() });
    let q = &eig.eigenvectors;
    q * DMatrix::from_diagonal(&roots) * q.transpose()
}

/// Trace of the PSD square root of a symmetric matrix, clamping small negative eigenvalues.
fn trace_sqrt(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|&l| if l < 0.0 { 0.0 } else { l.sqrt() })
        .sum()
}

/// Squared Fréchet distance
/// `‖μ1 - μ2‖² + tr(Σ1 + Σ2 - 2 (Σ1^½ Σ2 Σ1^½)^½)`.
pub fn gaussian_frechet(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(a.dim(), b.dim()));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let root_a = sqrtm_psd(&a.cov);
    let cross = trace_sqrt(&(&root_a * &b.cov * &root_a));
    let d = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_vec, seeded};

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(v))
    }

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = seeded(seed);
        let a = DMatrix::from_vec(n, n, gaussian_vec(&mut rng, n * n));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    #[test]
    fn fit_two_antipodal_samples() {
        let g = fit_gaussian(&[vec![1.0, -2.0], vec![-1.0, 2.0]]).unwrap();
        assert_eq!(g.mean.as_slice(), &[0.0, 0.0]);
        // unbiased: (1 + 1) / 1 = 2 for the first coordinate
        assert_eq!(g.cov[(0, 0)], 2.0);
        assert_eq!(g.cov[(0, 1)], -4.0);
    }

    #[test]
    fn constant_samples_have_zero_covariance() {
        let g = fit_gaussian(&vec![vec![3.0, 1.0]; 5]).unwrap();
        assert_eq!(g.cov, DMatrix::zeros(2, 2));
    }

    #[test]
    fn fit_rejects_single_sample() {
        assert!(fit_gaussian(&[vec![1.0]]).is_err());
    }

    #[test]
    fn fit_matches_direct_formula() {
        let s = vec![vec![1.0, 2.0], vec![2.0, 0.0], vec![4.0, 1.0]];
        let g = fit_gaussian(&s).unwrap();
        // means: 7/3, 1; deviations x: -4/3, -1/3, 5/3; y: 1, -1, 0
        assert!((g.mean[0] - 7.0 / 3.0).abs() < 1e-15);
        let vxx = (16.0 + 1.0 + 25.0) / 9.0 / 2.0;
        let vxy = (-4.0 / 3.0 + 1.0 / 3.0 + 0.0) / 2.0;
        let vyy = 2.0 / 2.0;
        assert!((g.cov[(0, 0)] - vxx).abs() < 1e-14);
        assert!((g.cov[(0, 1)] - vxy).abs() < 1e-14);
        assert!((g.cov[(1, 1)] - vyy).abs() < 1e-14);
    }

    #[test]
    fn identical_summaries_are_zero() {
        let g = GaussianSummary::new(vec![1.0, 2.0, 3.0], random_spd(3, 1), 10).unwrap();
        assert!(gaussian_frechet(&g, &g).unwrap() < 1e-10);
    }

    #[test]
    fn mean_shift_only() {
        let c = random_spd(4, 2);
        let a = GaussianSummary::new(vec![0.0; 4], c.clone(), 0).unwrap();
        let b = GaussianSummary::new(vec![1.0, -2.0, 0.5, 0.0], c, 0).unwrap();
        assert!((gaussian_frechet(&a, &b).unwrap() - 5.25).abs() < 1e-9);
    }

    #[test]
    fn commuting_case_equals_five() {
        // Σ(√λ1 - √λ2)² = (1 - 3)² + (2 - 1)² = 5
        let a = GaussianSummary::new(vec![0.0, 0.0], diag(&[1.0, 4.0]), 0).unwrap();
        let b = GaussianSummary::new(vec![0.0, 0.0], diag(&[9.0, 1.0]), 0).unwrap();
        assert!((gaussian_frechet(&a, &b).unwrap() - 5.0).abs() < 1e-8);
    }

    #[test]
    fn commuting_rotated_case_matches_eigenvalue_formula() {
        // same eigenbasis, rotated away from the axes
        let th: f64 = 0.3;
        let r = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
        let a = &r * diag(&[1.0, 4.0]) * r.transpose();
        let b = &r * diag(&[9.0, 1.0]) * r.transpose();
        let ga = GaussianSummary::new(vec![0.0, 0.0], a, 0).unwrap();
        let gb = GaussianSummary::new(vec![0.0, 0.0], b, 0).unwrap();
        assert!((gaussian_frechet(&ga, &gb).unwrap() - 5.0).abs() < 1e-8);
    }

    #[test]
    fn symmetric_in_arguments() {
        for seed in 0..10 {
            let a = GaussianSummary::new(vec![0.1; 5], random_spd(5, seed), 0).unwrap();
            let b = GaussianSummary::new(vec![-0.3; 5], random_spd(5, seed + 100), 0).unwrap();
            let ab = gaussian_frechet(&a, &b).unwrap();
            let ba = gaussian_frechet(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-8, "{ab} vs {ba}");
        }
    }

    #[test]
    fn sqrtm_squares_back() {
        for seed in 0..10 {
            let s = random_spd(6, seed);
            let r = sqrtm_psd(&s);
            assert!((&r * &r - &s).abs().max() < 1e-8);
        }
    }

    #[test]
    fn strictly_increasing_under_mean_translation() {
        let c = random_spd(3, 7);
        let a = GaussianSummary::new(vec![0.0; 3], c.clone(), 0).unwrap();
        let mut last = -1.0;
        for k in 0..6 {
            let shift = k as f64 * 0.5;
            let b = GaussianSummary::new(vec![shift, -shift, 0.0], c.clone(), 0).unwrap();
            let d = gaussian_frechet(&a, &b).unwrap();
            assert!(d > last);
            last = d;
        }
    }

    #[test]
    fn dimension_mismatch() {
        let a = GaussianSummary::new(vec![0.0; 2], DMatrix::identity(2, 2), 0).unwrap();
        let b = GaussianSummary::new(vec![0.0; 3], DMatrix::identity(3, 3), 0).unwrap();
        assert!(gaussian_frechet(&a, &b).is_err());
    }
}
