//! Windowed structural similarity over image tensors.
//!
//! Local statistics are computed with a separable window applied as two
//! banded matrix products (`K_h · X · K_wᵀ`), so the whole computation stays
//! on differentiable tensor primitives and gradients reach both images.

use candle_core::{DType, Device, IndexOp, Tensor};
use serde::{Deserialize, Serialize};

use crate::constraint::{SimMeasure, SimilarityMatrix};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Window {
    Gaussian { sigma: f64 },
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimConfig {
    pub window_size: usize,
    pub window: Window,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the (remapped) pixel values.
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window_size: 11,
            window: Window::Gaussian { sigma: 1.5 },
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.window_size % 2 == 0 {
            return invalid(format!("window size {} must be odd", self.window_size));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0 && self.dynamic_range > 0.0) {
            return invalid("k1, k2 and dynamic range must be positive");
        }
        if let Window::Gaussian { sigma } = self.window {
            if !(sigma > 0.0) {
                return invalid("gaussian window sigma must be positive");
            }
        }
        Ok(())
    }

    /// Normalized 1-D window weights.
    pub fn window_weights(&self) -> Vec<f64> {
        let n = self.window_size;
        match self.window {
            Window::Uniform => vec![1.0 / n as f64; n],
            Window::Gaussian { sigma } => {
                let centre = (n / 2) as f64;
                let raw: Vec<f64> = (0..n)
                    .map(|i| (-((i as f64 - centre).powi(2)) / (2.0 * sigma * sigma)).exp())
                    .collect();
                let total: f64 = raw.iter().sum();
                raw.into_iter().map(|w| w / total).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelRange {
    /// Values in `[0, 1]`.
    Unit,
    /// Values in `[-1, 1]` (tanh output); remapped to `[0, 1]` before SSIM.
    Symmetric,
}

/// Images laid out as `[batch, channels, height, width]`.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub pixels: Tensor,
    pub range: PixelRange,
}

impl ImageBatch {
    pub fn new(pixels: Tensor, range: PixelRange) -> Result<Self> {
        if pixels.rank() != 4 {
            return invalid(format!(
                "image batch must be rank 4 [b, c, h, w], got {:?}",
                pixels.dims()
            ));
        }
        Ok(Self { pixels, range })
    }

    /// Builds a batch from flat row-major images.
    pub fn from_vec(
        data: Vec<f64>,
        shape: (usize, usize, usize, usize),
        range: PixelRange,
        dtype: DType,
    ) -> Result<Self> {
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?;
        Self::new(t, range)
    }

    pub fn len(&self) -> usize {
        self.pixels.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let d = self.pixels.dims();
        (d[1], d[2], d[3])
    }

    /// Pixels mapped to `[0, 1]`.
    pub fn unit_pixels(&self) -> Result<Tensor> {
        Ok(match self.range {
            PixelRange::Unit => self.pixels.clone(),
            PixelRange::Symmetric => self.pixels.affine(0.5, 0.5)?,
        })
    }

    pub fn check_finite(&self) -> Result<()> {
        let flat: Vec<f64> = self.pixels.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("image batch contains non-finite pixels".into()));
        }
        Ok(())
    }

    /// Flattened images, one `Vec` per sample.
    pub fn rows(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .pixels
            .flatten_from(1)?
            .to_dtype(DType::F64)?
            .to_vec2()?)
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
        let idx = Tensor::new(idx.as_slice(), self.pixels.device())?;
        Self::new(self.pixels.index_select(&idx, 0)?, self.range)
    }
}

/// Banded `[out, len]` matrix applying the window in "valid" mode.
fn band_matrix(weights: &[f64], len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let k = weights.len();
    let out = len + 1 - k;
    let mut m = vec![0.0f64; out * len];
    for o in 0..out {
        for (t, w) in weights.iter().enumerate() {
            m[o * len + o + t] = *w;
        }
    }
    Ok(Tensor::from_vec(m, (out, len), device)?.to_dtype(dtype)?)
}

/// Precomputed window operators for one image geometry.
struct WindowFilter {
    rows: Tensor,
    cols_t: Tensor,
}

impl WindowFilter {
    fn new(cfg: &SsimConfig, h: usize, w: usize, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        if cfg.window_size > h.min(w) {
            return invalid(format!(
                "window size {} exceeds image size {h}x{w}",
                cfg.window_size
            ));
        }
        let weights = cfg.window_weights();
        Ok(Self {
            rows: band_matrix(&weights, h, dtype, device)?,
            cols_t: band_matrix(&weights, w, dtype, device)?.t()?.contiguous()?,
        })
    }

    /// Local weighted means of `[n, c, h, w]` → `[n, c, h', w']`.
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let flat = x.reshape((n * c, h, w))?;
        let y = self.rows.broadcast_matmul(&flat)?.broadcast_matmul(&self.cols_t)?;
        let (_, ho, wo) = y.dims3()?;
        Ok(y.reshape((n, c, ho, wo))?)
    }
}

fn index_tensor(idx: &[usize], device: &Device) -> Result<Tensor> {
    let v: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    Ok(Tensor::new(v.as_slice(), device)?)
}

/// Mean SSIM for each requested pair, as a differentiable `[pairs]` tensor.
///
/// Per-image local means and second moments are shared across all pairs;
/// only the cross moment is computed per pair.
pub fn ssim_pairs(
    images: &ImageBatch,
    pairs: &[(usize, usize)],
    cfg: &SsimConfig,
) -> Result<Tensor> {
    let n = images.len();
    for &(i, j) in pairs {
        if i >= n || j >= n {
            return invalid(format!("pair ({i}, {j}) out of range for batch of {n}"));
        }
    }
    let x = images.unit_pixels()?;
    let (_, _, h, w) = x.dims4()?;
    let device = x.device().clone();
    let filter = WindowFilter::new(cfg, h, w, x.dtype(), &device)?;
    if pairs.is_empty() {
        return Ok(Tensor::zeros(0, x.dtype(), &device)?);
    }
    let (c1, c2) = (cfg.c1(), cfg.c2());

    let mu = filter.apply(&x)?;
    let second = filter.apply(&x.sqr()?)?;

    let left: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let right: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let li = index_tensor(&left, &device)?;
    let ri = index_tensor(&right, &device)?;

    let mu_x = mu.index_select(&li, 0)?;
    let mu_y = mu.index_select(&ri, 0)?;
    let var_x = (second.index_select(&li, 0)? - mu_x.sqr()?)?;
    let var_y = (second.index_select(&ri, 0)? - mu_y.sqr()?)?;
    let cross = filter.apply(&(x.index_select(&li, 0)? * x.index_select(&ri, 0)?)?)?;
    let mu_xy = (&mu_x * &mu_y)?;
    let cov = (cross - &mu_xy)?;

    let num = (mu_xy.affine(2.0, c1)? * cov.affine(2.0, c2)?)?;
    let den = ((mu_x.sqr()? + mu_y.sqr()?)?.affine(1.0, c1)? * (var_x + var_y)?.affine(1.0, c2)?)?;
    let map = (num / den)?;
    Ok(map.flatten_from(1)?.mean(1)?)
}

/// SSIM of two images shaped `[c, h, w]` (or `[1, c, h, w]`).
pub fn ssim_pair(a: &Tensor, b: &Tensor, range: PixelRange, cfg: &SsimConfig) -> Result<f64> {
    if a.dims() != b.dims() {
        return invalid(format!("shape mismatch: {:?} vs {:?}", a.dims(), b.dims()));
    }
    let (a, b) = match a.rank() {
        3 => (a.unsqueeze(0)?, b.unsqueeze(0)?),
        4 if a.dims()[0] == 1 => (a.clone(), b.clone()),
        _ => return invalid(format!("expected a single image, got {:?}", a.dims())),
    };
    let batch = ImageBatch::new(Tensor::cat(&[&a, &b], 0)?, range)?;
    let s = ssim_pairs(&batch, &[(0, 1)], cfg)?;
    Ok(s.i(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Evaluates SSIM for the requested pairs into a [`SimilarityMatrix`].
pub fn ssim_matrix(
    batch: &ImageBatch,
    pairs: &[(usize, usize)],
    cfg: &SsimConfig,
) -> Result<SimilarityMatrix> {
    let values: Vec<f64> = ssim_pairs(batch, pairs, cfg)?
        .to_dtype(DType::F64)?
        .to_vec1()?;
    let mut m = SimilarityMatrix::new(SimMeasure::Ssim);
    for (&(i, j), v) in pairs.iter().zip(values) {
        m.insert(i, j, v)?;
    }
    Ok(m)
}
