#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scgan_core::latent::{CodeSpec, LatentBatch};
use scgan_core::ssim::SsimConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

pub fn discrete_codes(classes: &[usize], k: usize) -> LatentBatch {
    let spec = CodeSpec::discrete(k);
    let c: Vec<f64> = classes.iter().flat_map(|&cls| spec.one_hot(cls)).collect();
    LatentBatch::from_parts(vec![0.0; classes.len()], c, 1, spec).unwrap()
}

/// Sliding-window SSIM computed pixel by pixel over valid positions.
pub fn ssim_loop(a: &[f64], b: &[f64], h: usize, w: usize, cfg: &SsimConfig) -> f64 {
    let win = cfg.window_size;
    let g = cfg.window_weights();
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - win {
        for c in 0..=w - win {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..win {
                for j in 0..win {
                    let k = g[i] * g[j];
                    let p = (r + i) * w + c + j;
                    mx += k * a[p];
                    my += k * b[p];
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..win {
                for j in 0..win {
                    let k = g[i] * g[j];
                    let p = (r + i) * w + c + j;
                    vx += k * (a[p] - mx) * (a[p] - mx);
                    vy += k * (b[p] - my) * (b[p] - my);
                    cov += k * (a[p] - mx) * (b[p] - my);
                }
            }
            total += (2.0 * mx * my + c1) * (2.0 * cov + c2)
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Average log-density of each test point under an isotropic Gaussian mixture.
pub fn parzen_loop(generated: &[Vec<f64>], test: &[Vec<f64>], sigma: f64) -> f64 {
    let d = generated[0].len() as f64;
    let mut acc = 0.0;
    for x in test {
        let mut density = 0.0;
        for g in generated {
            let sq: f64 = x.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum();
            density += (-sq / (2.0 * sigma * sigma)).exp()
                / (2.0 * std::f64::consts::PI * sigma * sigma).powf(d / 2.0);
        }
        acc += (density / generated.len() as f64).ln();
    }
    acc / test.len() as f64
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a - b‖ / ‖b‖`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

pub fn var_from(data: &[f64], shape: (usize, usize, usize, usize)) -> Var {
    Var::from_tensor(&Tensor::from_vec(data.to_vec(), shape, &Device::Cpu).unwrap()).unwrap()
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn tiny_arch(code: CodeSpec) -> scgan_core::models::Architecture {
    scgan_core::models::Architecture {
        image_size: 8,
        noise_dim: 4,
        code,
        hidden: 16,
        channels: (8, 4),
        q_hidden: 8,
        ..scgan_core::models::Architecture::mnist()
    }
}

/// Copies `src` parameters into `dst` by name. A conditional first
/// convolution receives the unconditional kernel with zero weights on the
/// code channels.
pub fn transplant(src: &scgan_core::models::ModelBundle, dst: &scgan_core::models::ModelBundle) {
    let mut from = src.generator_side_params();
    from.extend("", &src.discriminator_params());
    let mut to = dst.generator_side_params();
    to.extend("", &dst.discriminator_params());
    for (name, var) in to.iter() {
        let source = from.get(name).unwrap_or_else(|| panic!("no source for {name}")).as_tensor();
        let value = if source.dims() == var.dims() {
            source.clone()
        } else {
            let extra = var.dims()[1] - source.dims()[1];
            let (o, _, kh, kw) = source.dims4().unwrap();
            let zeros = Tensor::zeros((o, extra, kh, kw), source.dtype(), source.device()).unwrap();
            Tensor::cat(&[source, &zeros], 1).unwrap()
        };
        var.set(&value).unwrap();
    }
}

/// Both representation dimensions carry each standardized factor with equal weight.
pub fn mixing_score(seed: u64) -> f64 {
    let source = scgan_core::data::SyntheticFactors::default();
    let mut decode = scgan_core::metrics::factor::synthetic_identity(source.clone());
    let mut rng = rng(seed);
    let mut signs = [1.0f64; 4];
    while signs[0] * signs[3] == signs[1] * signs[2] {
        for s in signs.iter_mut() {
            *s = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
    }
    let sizes = source.factor_sizes();
    let stats: Vec<(f64, f64)> = sizes
        .iter()
        .map(|&k| ((k as f64 - 1.0) / 2.0, ((k * k - 1) as f64 / 12.0).sqrt()))
        .collect();
    let mut repr = move |images: &scgan_core::ssim::ImageBatch| -> scgan_core::Result<Vec<Vec<f64>>> {
        Ok(decode(images)?
            .into_iter()
            .map(|f| {
                let u = (f[0] - stats[0].0) / stats[0].1;
                let v = (f[1] - stats[1].0) / stats[1].1;
                vec![signs[0] * u + signs[1] * v, signs[2] * u + signs[3] * v]
            })
            .collect())
    };
    let mut src = source;
    scgan_core::metrics::factor::factorvae_score(&mut src, &mut repr, &scgan_core::metrics::factor::FactorVaeConfig::default(), seed).unwrap().score
}
