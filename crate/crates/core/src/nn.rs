//! Minimal layers and optimizer on top of candle tensors.
//!
//! Convolutions are lowered to a single matrix product plus reshapes,
//! narrows and zero padding, all of which carry gradients. Parameter
//! initialization draws from a caller-provided seeded RNG so that a model is
//! a pure function of its seed.

use candle_core::{DType, Device, Tensor, Var, WithDType};
use candle_core::backprop::GradStore;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named trainable tensors in a fixed order.
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: Vec<(String, Var)>,
}

impl Params {
    pub fn push(&mut self, name: impl Into<String>, var: Var) {
        self.entries.push((name.into(), var));
    }

    pub fn extend(&mut self, prefix: &str, other: &Params) {
        for (name, var) in &other.entries {
            self.entries.push((format!("{prefix}{name}"), var.clone()));
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, Var)> {
        self.entries.iter()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }
}

fn uniform_var(
    shape: &[usize],
    bound: f64,
    rng: &mut impl Rng,
    dtype: DType,
    device: &Device,
) -> Result<Var> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    let t = Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?;
    Ok(Var::from_tensor(&t)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// `[in, out]`, so the forward product needs no transpose.
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: uniform_var(&[in_dim, out_dim], bound, rng, dtype, device)?,
            bias: uniform_var(&[out_dim], bound, rng, dtype, device)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight)?.broadcast_add(&self.bias)?)
    }

    pub fn params(&self) -> Params {
        let mut p = Params::default();
        p.push("weight", self.weight.clone());
        p.push("bias", self.bias.clone());
        p
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[out, in, k, k]`
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: uniform_var(&[out_ch, in_ch, kernel, kernel], bound, rng, dtype, device)?,
            bias: uniform_var(&[out_ch], bound, rng, dtype, device)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.padding)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }

    pub fn params(&self) -> Params {
        let mut p = Params::default();
        p.push("weight", self.weight.clone());
        p.push("bias", self.bias.clone());
        p
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    /// `[in, out, k, k]`
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let bound = 1.0 / ((out_ch * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: uniform_var(&[in_ch, out_ch, kernel, kernel], bound, rng, dtype, device)?,
            bias: uniform_var(&[out_ch], bound, rng, dtype, device)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv_transpose2d(x, &self.weight, self.stride, self.padding)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }

    pub fn params(&self) -> Params {
        let mut p = Params::default();
        p.push("weight", self.weight.clone());
        p.push("bias", self.bias.clone());
        p
    }
}

/// Splits `[b, c, H, W]` (H, W multiples of `s`) into its `s × s` phase grids.
fn phases(x: &Tensor, s: usize) -> Result<Vec<Vec<Tensor>>> {
    let (b, c, h, w) = x.dims4()?;
    let grid = x.reshape((b, c, h / s, s, w / s, s))?;
    let mut out = Vec::with_capacity(s);
    for ry in 0..s {
        let row = grid.narrow(3, ry, 1)?;
        let mut cols = Vec::with_capacity(s);
        for rx in 0..s {
            cols.push(row.narrow(5, rx, 1)?.reshape((b, c, h / s, w / s))?);
        }
        out.push(cols);
    }
    Ok(out)
}

/// Cross-correlation of `x: [b, c, h, w]` with `weight: [o, c, k, k]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, wc, k, k2) = weight.dims4()?;
    if wc != c || k != k2 {
        return Err(Error::InvalidArgument(format!(
            "conv weight {:?} incompatible with input {:?}",
            weight.dims(),
            x.dims()
        )));
    }
    let s = stride.max(1);
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::InvalidArgument("kernel larger than padded input".into()));
    }
    let ho = (h + 2 * padding - k) / s + 1;
    let wo = (w + 2 * padding - k) / s + 1;
    let span = (k - 1) / s;
    let hs = (h + 2 * padding).div_ceil(s).max(ho + span);
    let ws = (w + 2 * padding).div_ceil(s).max(wo + span);
    let xp = x
        .pad_with_zeros(2, padding, hs * s - h - padding)?
        .pad_with_zeros(3, padding, ws * s - w - padding)?;
    let ph = phases(&xp, s)?;
    let mut taps = Vec::with_capacity(k * k);
    for ky in 0..k {
        for kx in 0..k {
            let p = &ph[ky % s][kx % s];
            taps.push(p.narrow(2, ky / s, ho)?.narrow(3, kx / s, wo)?);
        }
    }
    // [b, c, k*k, ho, wo] -> [b, ho, wo, c*k*k]
    let cols = Tensor::stack(&taps, 2)?
        .reshape((b, c * k * k, ho * wo))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * ho * wo, c * k * k))?;
    let wm = weight.reshape((o, c * k * k))?.t()?;
    let y = cols.matmul(&wm)?;
    Ok(y.reshape((b, ho, wo, o))?.permute((0, 3, 1, 2))?.contiguous()?)
}

/// Transposed convolution of `x: [b, i, h, w]` with `weight: [i, o, k, k]`.
pub fn conv_transpose2d(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (wc, o, k, k2) = weight.dims4()?;
    if wc != c || k != k2 {
        return Err(Error::InvalidArgument(format!(
            "transposed conv weight {:?} incompatible with input {:?}",
            weight.dims(),
            x.dims()
        )));
    }
    let s = stride.max(1);
    let out_h = (h - 1) * s + k;
    let out_w = (w - 1) * s + k;
    if out_h <= 2 * padding || out_w <= 2 * padding {
        return Err(Error::InvalidArgument("padding removes the whole output".into()));
    }
    let q = k.div_ceil(s);
    // every input pixel scatters a [o, k, k] patch
    let xm = x.permute((0, 2, 3, 1))?.contiguous()?.reshape((b * h * w, c))?;
    let patches = xm.matmul(&weight.reshape((c, o * k * k))?)?;
    // [b, h, w, o, k*k] -> [b, k*k, o, h, w]
    let patches = patches
        .reshape((b, h * w, o, k * k))?
        .permute((0, 3, 2, 1))?
        .contiguous()?
        .reshape((b, k * k, o, h, w))?;

    let (hc, wc_) = (h + q - 1, w + q - 1);
    let mut canvas: Vec<Vec<Option<Tensor>>> = vec![vec![None; s]; s];
    for ky in 0..k {
        for kx in 0..k {
            let (qy, qx) = (ky / s, kx / s);
            let tap = patches
                .narrow(1, ky * k + kx, 1)?
                .squeeze(1)?
                .pad_with_zeros(2, qy, q - 1 - qy)?
                .pad_with_zeros(3, qx, q - 1 - qx)?;
            let slot = &mut canvas[ky % s][kx % s];
            *slot = Some(match slot.take() {
                Some(acc) => (acc + tap)?,
                None => tap,
            });
        }
    }
    let zeros = Tensor::zeros((b, o, hc, wc_), x.dtype(), x.device())?;
    let mut rows = Vec::with_capacity(s);
    for row in canvas {
        let cols: Vec<Tensor> = row
            .into_iter()
            .map(|t| t.unwrap_or_else(|| zeros.clone()))
            .collect();
        rows.push(Tensor::stack(&cols, 4)?.reshape((b, o, hc, wc_ * s))?);
    }
    let full = Tensor::stack(&rows, 3)?.reshape((b, o, hc * s, wc_ * s))?;
    let ho = out_h - 2 * padding;
    let wo = out_w - 2 * padding;
    Ok(full.narrow(2, padding, ho)?.narrow(3, padding, wo)?.contiguous()?)
}

/// Whether normalization layers use batch statistics or running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch normalization over the channel axis (dim 1) of `[b, c]` or
/// `[b, c, h, w]` inputs. Running statistics are non-trainable `Var`s so they
/// alias across clones the same way parameters do.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(channels: usize, dtype: DType, device: &Device) -> Result<Self> {
        let ones = Tensor::ones(channels, dtype, device)?;
        let zeros = Tensor::zeros(channels, dtype, device)?;
        Ok(Self {
            gamma: Var::from_tensor(&ones)?,
            beta: Var::from_tensor(&zeros)?,
            running_mean: Var::from_tensor(&zeros)?,
            running_var: Var::from_tensor(&ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// In `Train` mode normalizes with biased batch statistics and folds the
    /// unbiased variance into the running averages.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = x.dims()[1];
        let mut shape = vec![1; x.rank()];
        shape[1] = c;
        let axes: Vec<usize> = (0..x.rank()).filter(|&d| d != 1).collect();
        let (mean, var) = match mode {
            Mode::Train => {
                let count: usize = axes.iter().map(|&d| x.dims()[d]).product();
                let mean = x.mean_keepdim(axes.as_slice())?;
                let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim(axes.as_slice())?;
                let m = self.momentum;
                let unbiased = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
                let flat_mean = mean.detach().flatten_all()?;
                let flat_var = var.detach().flatten_all()?.affine(unbiased, 0.0)?;
                self.running_mean
                    .set(&((self.running_mean.as_tensor() * (1.0 - m))? + (flat_mean * m)?)?)?;
                self.running_var
                    .set(&((self.running_var.as_tensor() * (1.0 - m))? + (flat_var * m)?)?)?;
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.as_tensor().reshape(shape.as_slice())?,
                self.running_var.as_tensor().reshape(shape.as_slice())?,
            ),
        };
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.as_tensor().reshape(shape.as_slice())?)?
            .broadcast_add(&self.beta.as_tensor().reshape(shape.as_slice())?)?)
    }

    pub fn params(&self) -> Params {
        let mut p = Params::default();
        p.push("gamma", self.gamma.clone());
        p.push("beta", self.beta.clone());
        p
    }

    pub fn buffers(&self) -> Params {
        let mut p = Params::default();
        p.push("running_mean", self.running_mean.clone());
        p.push("running_var", self.running_var.clone());
        p
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

/// Logistic function written through `tanh` so large logits stay finite.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let lse = x.log_sum_exp(1)?.unsqueeze(1)?;
    Ok(x.broadcast_sub(&lse)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction and explicit, serializable moment buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    vars: Vec<Var>,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl Adam {
    pub fn new(vars: Vec<Var>, config: AdamConfig) -> Result<Self> {
        let first = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let second = first.clone();
        Ok(Self {
            config,
            step: 0,
            vars,
            first,
            second,
        })
    }

    /// Applies one update from `grads`; parameters without a gradient are left alone.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        for i in 0..self.vars.len() {
            let Some(g) = grads.get(&self.vars[i]) else { continue };
            match self.vars[i].dtype() {
                DType::F32 => self.update::<f32>(i, g)?,
                DType::F64 => self.update::<f64>(i, g)?,
                other => return Err(Error::InvalidArgument(format!("adam does not support {other:?}"))),
            }
        }
        Ok(())
    }

    /// Fused bias-corrected update of parameter `i` on host buffers.
    fn update<T: WithDType>(&mut self, i: usize, grad: &Tensor) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let var = &self.vars[i];
        let shape = var.shape().clone();
        let mut p: Vec<T> = var.as_tensor().flatten_all()?.to_vec1()?;
        let g: Vec<T> = grad.flatten_all()?.to_vec1()?;
        let mut m: Vec<T> = self.first[i].flatten_all()?.to_vec1()?;
        let mut v: Vec<T> = self.second[i].flatten_all()?.to_vec1()?;
        for k in 0..p.len() {
            let gk = g[k].to_f64();
            let mk = beta1 * m[k].to_f64() + (1.0 - beta1) * gk;
            let vk = beta2 * v[k].to_f64() + (1.0 - beta2) * gk * gk;
            let update = lr * (mk / bc1) / ((vk / bc2).sqrt() + eps);
            p[k] = T::from_f64(p[k].to_f64() - update);
            m[k] = T::from_f64(mk);
            v[k] = T::from_f64(vk);
        }
        let dev = var.device().clone();
        var.set(&Tensor::from_vec(p, shape.clone(), &dev)?)?;
        self.first[i] = Tensor::from_vec(m, shape.clone(), &dev)?;
        self.second[i] = Tensor::from_vec(v, shape, &dev)?;
        Ok(())
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Restores moment buffers captured by a checkpoint.
    pub fn restore(&mut self, step: u64, first: Vec<Tensor>, second: Vec<Tensor>) -> Result<()> {
        if first.len() != self.vars.len() || second.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {} / {} buffers for {} parameters",
                first.len(),
                second.len(),
                self.vars.len()
            )));
        }
        for ((v, m), s) in self.vars.iter().zip(&first).zip(&second) {
            if v.dims() != m.dims() || v.dims() != s.dims() {
                return Err(Error::Checkpoint(format!(
                    "optimizer buffer shape {:?} does not match parameter {:?}",
                    m.dims(),
                    v.dims()
                )));
            }
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }
}
