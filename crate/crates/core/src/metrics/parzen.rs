use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParzenConfig {
    pub sample_count: usize,
    pub sigmas: Vec<f64>,
    pub validation_fraction: f64,
}

impl Default for ParzenConfig {
    fn default() -> Self {
        Self {
            sample_count: 10_000,
            sigmas: log_grid(0.01, 1.0, 20),
            validation_fraction: 0.1,
        }
    }
}

impl ParzenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigmas.is_empty() || self.sigmas.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("sigma grid must be non-empty and positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation fraction must lie in (0, 1)".into()));
        }
        if self.sample_count == 0 {
            return Err(Error::Config("sample count must be positive".into()));
        }
        Ok(())
    }
}

/// `n` points evenly spaced in log scale from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParzenResult {
    pub mean: f64,
    pub sem: f64,
    pub sigma: f64,
    /// Validation log-likelihood for each grid entry.
    pub validation: Vec<(f64, f64)>,
    pub evaluated: usize,
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|r| r.len() != d) {
        return invalid("rows have different lengths");
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

/// Squared distances `[test, centers]`. Entries that lose precision in the
/// expanded form are recomputed directly, so zero distances are exact.
fn squared_distances(test: &DMatrix<f64>, centers: &DMatrix<f64>) -> DMatrix<f64> {
    let tn: Vec<f64> = test.row_iter().map(|r| r.norm_squared()).collect();
    let cn: Vec<f64> = centers.row_iter().map(|r| r.norm_squared()).collect();
    let mut d = test * centers.transpose();
    for i in 0..d.nrows() {
        for j in 0..d.ncols() {
            let v = tn[i] + cn[j] - 2.0 * d[(i, j)];
            d[(i, j)] = if v <= 1e-6 * (tn[i] + cn[j]) {
                (test.row(i) - centers.row(j)).norm_squared()
            } else {
                v
            };
        }
    }
    d
}

/// Log density of each test row under the Gaussian kernel estimate.
fn log_densities(dist: &DMatrix<f64>, sigma: f64, dim: usize) -> Vec<f64> {
    let n = dist.ncols() as f64;
    let norm = -n.ln() - dim as f64 / 2.0 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    let scale = -1.0 / (2.0 * sigma * sigma);
    dist.row_iter()
        .map(|row| {
            let max = row.iter().map(|d| d * scale).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|d| (d * scale - max).exp()).sum();
            max + sum.ln() + norm
        })
        .collect()
}

fn mean_sem(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

const CHUNK: usize = 512;

fn chunked_log_densities(test: &DMatrix<f64>, centers: &DMatrix<f64>, sigmas: &[f64]) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::with_capacity(test.nrows()); sigmas.len()];
    let mut start = 0;
    while start < test.nrows() {
        let len = CHUNK.min(test.nrows() - start);
        let dist = squared_distances(&test.rows(start, len).into_owned(), centers);
        for (k, &s) in sigmas.iter().enumerate() {
            out[k].extend(log_densities(&dist, s, centers.ncols()));
        }
        start += len;
    }
    out
}

/// Kernel density estimate centered on `generated`, scored on `test`.
///
/// With more than one sigma the first `validation_fraction` of the test rows
/// pick the bandwidth and the remaining rows are scored.
pub fn parzen_estimate(generated: &[Vec<f64>], test: &[Vec<f64>], cfg: &ParzenConfig) -> Result<ParzenResult> {
    cfg.validate()?;
    if generated.is_empty() || test.is_empty() {
        return invalid("parzen estimate needs generated and test samples");
    }
    let centers = to_matrix(generated)?;
    let t = to_matrix(test)?;
    if centers.ncols() != t.ncols() {
        return invalid(format!("dimension mismatch: {} vs {}", centers.ncols(), t.ncols()));
    }
    let (sigma, validation, eval) = if cfg.sigmas.len() == 1 {
        (cfg.sigmas[0], Vec::new(), t)
    } else {
        if t.nrows() < 2 {
            return invalid("bandwidth selection needs at least two test samples");
        }
        let n_val = ((t.nrows() as f64 * cfg.validation_fraction).round() as usize).clamp(1, t.nrows() - 1);
        let val = t.rows(0, n_val).into_owned();
        let scores = chunked_log_densities(&val, &centers, &cfg.sigmas);
        let validation: Vec<(f64, f64)> = cfg
            .sigmas
            .iter()
            .zip(&scores)
            .map(|(&s, v)| (s, v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        let best = validation
            .iter()
            .filter(|(_, v)| v.is_finite())
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .ok_or_else(|| {
                Error::Numerical(format!("every sigma underflowed on validation: {validation:?}"))
            })?
            .0;
        let rest = t.rows(n_val, t.nrows() - n_val).into_owned();
        (best, validation, rest)
    };
    let ll = chunked_log_densities(&eval, &centers, &[sigma]).remove(0);
    let (mean, sem) = mean_sem(&ll);
    if !mean.is_finite() {
        return Err(Error::Numerical(format!("log-likelihood is {mean} at sigma {sigma}")));
    }
    Ok(ParzenResult {
        mean,
        sem,
        sigma,
        validation,
        evaluated: ll.len(),
    })
}
