use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, Error, Result};

/// Diagonal shrinkage added to estimated covariances.
pub const SHRINKAGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianMoments {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return invalid("covariance shape does not match mean");
        }
        Ok(Self { mean, cov })
    }

    /// Sample mean and unbiased covariance plus [`SHRINKAGE`] on the diagonal.
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return invalid(format!("need at least 2 feature vectors, got {n}"));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return invalid("feature vectors must share a positive dimension");
        }
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let mut centered = x;
        for j in 0..d {
            let m = mean[j];
            centered.column_mut(j).add_scalar_mut(-m);
        }
        let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
        for j in 0..d {
            cov[(j, j)] += SHRINKAGE;
        }
        Ok(Self { mean, cov })
    }
}

fn symmetric_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::try_new(sym, 1e-14, 10_000)
        .ok_or_else(|| Error::Numerical("eigendecomposition did not converge".into()))
}

/// Trace of `(Σ1 Σ2)^{1/2}` via the symmetric product `Σ1^{1/2} Σ2 Σ1^{1/2}`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let ea = symmetric_eigen(a.clone())?;
    let roots = ea.eigenvalues.map(|v| v.max(0.0).sqrt());
    let half = &ea.eigenvectors * DMatrix::from_diagonal(&roots) * ea.eigenvectors.transpose();
    let inner = symmetric_eigen(&half * b * &half)?;
    Ok(inner.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum())
}

pub fn fid_from_moments(a: &GaussianMoments, b: &GaussianMoments) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return invalid(format!("feature dimension mismatch: {} vs {}", a.mean.len(), b.mean.len()));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let tr = a.cov.trace() + b.cov.trace() - 2.0 * trace_sqrt_product(&a.cov, &b.cov)?;
    let v = diff + tr;
    if !v.is_finite() {
        return Err(Error::Numerical(format!("fid evaluated to {v}")));
    }
    Ok(v.max(0.0))
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn fid(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    if let (Some(r), Some(f)) = (real.first(), fake.first()) {
        if r.len() != f.len() {
            return invalid(format!("feature dimension mismatch: {} vs {}", r.len(), f.len()));
        }
    }
    fid_from_moments(&GaussianMoments::fit(real)?, &GaussianMoments::fit(fake)?)
}
