use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SyntheticFactors;
use crate::error::{invalid, Error, Result};
use crate::latent::{sample_latent_with, CodeKind, LatentBatch, NoiseDistribution};
use crate::metrics::extractor::{symmetric_pixels, ConvNet};
use crate::models::ModelBundle;
use crate::nn::{Adam, AdamConfig};
use crate::ssim::{ImageBatch, PixelRange};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorVaeConfig {
    pub votes: usize,
    /// Images per vote.
    pub batch: usize,
    /// Images used to estimate per-dimension scales.
    pub normalization_samples: usize,
    /// Fraction of votes held out for scoring.
    pub eval_fraction: f64,
}

impl Default for FactorVaeConfig {
    fn default() -> Self {
        Self {
            votes: 800,
            batch: 64,
            normalization_samples: 2000,
            eval_fraction: 0.5,
        }
    }
}

/// Images generated from discrete ground-truth factors.
pub trait FactorSource {
    fn factor_sizes(&self) -> Vec<usize>;

    /// `n` images in which factor `fixed` shares one random value and every
    /// other factor is drawn independently.
    fn sample(&mut self, n: usize, fixed: Option<usize>, rng: &mut ChaCha8Rng) -> Result<ImageBatch>;
}

pub trait Representation {
    fn encode(&mut self, images: &ImageBatch) -> Result<Vec<Vec<f64>>>;
}

impl<F: FnMut(&ImageBatch) -> Result<Vec<Vec<f64>>>> Representation for F {
    fn encode(&mut self, images: &ImageBatch) -> Result<Vec<Vec<f64>>> {
        self(images)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorVaeResult {
    pub score: f64,
    /// Representation dimensions dropped for having zero variance.
    pub excluded: Vec<usize>,
    pub train_votes: usize,
    pub eval_votes: usize,
}

fn draw_factors(sizes: &[usize], n: usize, fixed: Option<usize>, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let held = fixed.map(|k| (k, rng.random_range(0..sizes[k])));
    (0..n)
        .map(|_| {
            sizes
                .iter()
                .enumerate()
                .map(|(k, &s)| match held {
                    Some((hk, v)) if hk == k => v,
                    _ => rng.random_range(0..s),
                })
                .collect()
        })
        .collect()
}

fn encode_checked(repr: &mut dyn Representation, images: &ImageBatch, factors: usize) -> Result<Vec<Vec<f64>>> {
    let z = repr.encode(images)?;
    if z.len() != images.len() {
        return invalid(format!("representation returned {} rows for {} images", z.len(), images.len()));
    }
    let d = z.first().map(Vec::len).unwrap_or(0);
    if d < factors || z.iter().any(|r| r.len() != d) {
        return invalid(format!("representation dimension {d} is below the {factors} factors"));
    }
    Ok(z)
}

fn variances(z: &[Vec<f64>], dims: &[usize], scale: &[f64]) -> Vec<f64> {
    let n = z.len() as f64;
    dims.iter()
        .map(|&d| {
            let mean = z.iter().map(|r| r[d] / scale[d]).sum::<f64>() / n;
            z.iter().map(|r| (r[d] / scale[d] - mean).powi(2)).sum::<f64>() / (n - 1.0)
        })
        .collect()
}

/// Majority-vote disentanglement score in `[0, 1]`.
pub fn factorvae_score(
    source: &mut dyn FactorSource,
    repr: &mut dyn Representation,
    cfg: &FactorVaeConfig,
    seed: u64,
) -> Result<FactorVaeResult> {
    let sizes = source.factor_sizes();
    if sizes.len() < 2 {
        return invalid(format!("factor score needs at least 2 factors, got {}", sizes.len()));
    }
    if cfg.batch < 2 || cfg.normalization_samples < 2 || cfg.votes < 2 {
        return invalid("batch, normalization samples and votes must each be at least 2");
    }
    if !(cfg.eval_fraction > 0.0 && cfg.eval_fraction < 1.0) {
        return invalid("eval fraction must lie in (0, 1)");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = source.sample(cfg.normalization_samples, None, &mut rng)?;
    let z = encode_checked(repr, &images, sizes.len())?;
    let dim = z[0].len();
    let all: Vec<usize> = (0..dim).collect();
    let scale: Vec<f64> = variances(&z, &all, &vec![1.0; dim]).iter().map(|v| v.sqrt()).collect();
    let (active, excluded): (Vec<usize>, Vec<usize>) = all.into_iter().partition(|&d| scale[d] > 1e-12);
    if !excluded.is_empty() {
        log::warn!("excluding zero-variance representation dimensions {excluded:?}");
    }
    if active.is_empty() {
        return Err(Error::Numerical("every representation dimension has zero variance".into()));
    }
    let mut votes = Vec::with_capacity(cfg.votes);
    for _ in 0..cfg.votes {
        let k = rng.random_range(0..sizes.len());
        let batch = source.sample(cfg.batch, Some(k), &mut rng)?;
        let z = encode_checked(repr, &batch, sizes.len())?;
        let v = variances(&z, &active, &scale);
        let arg = (0..v.len()).fold(0, |b, i| if v[i] < v[b] { i } else { b });
        votes.push((arg, k));
    }
    let n_eval = ((cfg.votes as f64 * cfg.eval_fraction).round() as usize).clamp(1, cfg.votes - 1);
    let (train, eval) = votes.split_at(cfg.votes - n_eval);
    let mut counts = vec![vec![0usize; sizes.len()]; active.len()];
    for &(d, k) in train {
        counts[d][k] += 1;
    }
    let classifier: Vec<usize> = counts
        .iter()
        .map(|c| (0..c.len()).fold(0, |b, k| if c[k] > c[b] { k } else { b }))
        .collect();
    let correct = eval.iter().filter(|&&(d, k)| classifier[d] == k).count();
    Ok(FactorVaeResult {
        score: correct as f64 / eval.len() as f64,
        excluded,
        train_votes: train.len(),
        eval_votes: eval.len(),
    })
}

impl FactorSource for SyntheticFactors {
    fn factor_sizes(&self) -> Vec<usize> {
        SyntheticFactors::factor_sizes(self)
    }

    fn sample(&mut self, n: usize, fixed: Option<usize>, rng: &mut ChaCha8Rng) -> Result<ImageBatch> {
        let factors = draw_factors(&SyntheticFactors::factor_sizes(self), n, fixed, rng);
        let mut data = Vec::with_capacity(n * self.size * self.size);
        for f in &factors {
            data.extend(self.render(f[0], f[1]).iter().map(|&p| p as f64 / 255.0));
        }
        ImageBatch::from_vec(data, (n, 1, self.size, self.size), PixelRange::Unit, DType::F32)
    }
}

/// Exact decoder from synthetic images back to `(shape, position)`.
pub fn synthetic_identity(source: SyntheticFactors) -> impl FnMut(&ImageBatch) -> Result<Vec<Vec<f64>>> {
    let templates: Vec<(Vec<bool>, [f64; 2])> = (0..SyntheticFactors::SHAPES)
        .flat_map(|s| (0..SyntheticFactors::POSITIONS).map(move |p| (s, p)))
        .map(|(s, p)| (source.render(s, p).iter().map(|&v| v > 127).collect(), [s as f64, p as f64]))
        .collect();
    move |images: &ImageBatch| {
        images
            .unit_pixels()?
            .flatten_from(1)?
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?
            .iter()
            .map(|row| {
                let bits: Vec<bool> = row.iter().map(|&v| v > 0.5).collect();
                templates
                    .iter()
                    .find(|(t, _)| *t == bits)
                    .map(|(_, f)| f.to_vec())
                    .ok_or_else(|| Error::InvalidArgument("image is not a synthetic factor rendering".into()))
            })
            .collect()
    }
}

/// Factors of a trained generator: the code (one factor for a discrete
/// code, one per slot for a continuous code) followed by the first
/// `noise_factors` noise coordinates, each continuous value quantized into
/// `bins` levels.
pub struct GanFactorSource<'a> {
    pub bundle: &'a ModelBundle,
    pub noise_factors: usize,
    pub bins: usize,
}

impl<'a> GanFactorSource<'a> {
    pub fn new(bundle: &'a ModelBundle, noise_factors: usize, bins: usize) -> Result<Self> {
        if noise_factors > bundle.arch.noise_dim || bins < 2 {
            return invalid("noise factors must fit the noise dimension and bins must be ≥ 2");
        }
        Ok(Self {
            bundle,
            noise_factors,
            bins,
        })
    }

    fn code_factors(&self) -> usize {
        match self.bundle.arch.code.kind {
            CodeKind::Discrete => 1,
            CodeKind::Continuous => self.bundle.arch.code.cardinality,
        }
    }

    fn level(&self, bin: usize, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * (bin as f64 + 0.5) / self.bins as f64
    }

    fn noise_range(&self) -> (f64, f64) {
        match self.bundle.arch.noise_distribution {
            NoiseDistribution::Uniform => (-1.0, 1.0),
            NoiseDistribution::StandardNormal => (-2.0, 2.0),
        }
    }

    /// Latents for explicit factor values.
    pub fn latents(&self, factors: &[Vec<usize>], rng: &mut ChaCha8Rng) -> Result<LatentBatch> {
        let arch = &self.bundle.arch;
        let mut latent = sample_latent_with(&arch.noise_spec(), &arch.code, factors.len(), rng)?;
        let kd = arch.code_dim();
        let cf = self.code_factors();
        let (nlo, nhi) = self.noise_range();
        for (i, f) in factors.iter().enumerate() {
            let c = &mut latent.c[i * kd..(i + 1) * kd];
            match arch.code.kind {
                CodeKind::Discrete => c.copy_from_slice(&arch.code.one_hot(f[0])),
                CodeKind::Continuous => {
                    for (s, v) in c.iter_mut().enumerate() {
                        *v = self.level(f[s], arch.code.range.0, arch.code.range.1);
                    }
                }
            }
            for j in 0..self.noise_factors {
                latent.z[i * arch.noise_dim + j] = self.level(f[cf + j], nlo, nhi);
            }
        }
        Ok(latent)
    }

    /// Regression targets for the post-hoc encoder: code values followed by
    /// the factor noise coordinates.
    pub fn targets(&self, latent: &LatentBatch) -> Vec<f32> {
        (0..latent.batch)
            .flat_map(|i| {
                let mut t: Vec<f32> = latent.code(i).iter().map(|&v| v as f32).collect();
                t.extend(latent.noise(i)[..self.noise_factors].iter().map(|&v| v as f32));
                t
            })
            .collect()
    }

    pub fn target_dim(&self) -> usize {
        self.bundle.arch.code_dim() + self.noise_factors
    }
}

impl FactorSource for GanFactorSource<'_> {
    fn factor_sizes(&self) -> Vec<usize> {
        let code = match self.bundle.arch.code.kind {
            CodeKind::Discrete => vec![self.bundle.arch.code.cardinality],
            CodeKind::Continuous => vec![self.bins; self.bundle.arch.code.cardinality],
        };
        code.into_iter().chain(std::iter::repeat_n(self.bins, self.noise_factors)).collect()
    }

    fn sample(&mut self, n: usize, fixed: Option<usize>, rng: &mut ChaCha8Rng) -> Result<ImageBatch> {
        let factors = draw_factors(&self.factor_sizes(), n, fixed, rng);
        let latent = self.latents(&factors, rng)?;
        self.bundle.sample(&latent)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 64,
            lr: 1e-3,
        }
    }
}

/// Encoder trained after the fact to regress latent factors from generated images.
pub struct PosthocEncoder {
    pub net: ConvNet,
    pub final_loss: f64,
}

impl PosthocEncoder {
    pub fn train(source: &GanFactorSource<'_>, cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        let arch = &source.bundle.arch;
        let net = ConvNet::new(arch.image_channels, arch.image_size, 128, source.target_dim(), seed)?;
        let mut opt = Adam::new(
            net.params().vars(),
            AdamConfig {
                lr: cfg.lr,
                beta1: 0.9,
                ..AdamConfig::default()
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut final_loss = f64::NAN;
        for _ in 0..cfg.steps {
            let latent = sample_latent_with(&arch.noise_spec(), &arch.code, cfg.batch, &mut rng)?;
            let images = source.bundle.sample(&latent)?;
            let x = symmetric_pixels(&images)?.to_dtype(DType::F32)?;
            let y = Tensor::from_vec(source.targets(&latent), (cfg.batch, source.target_dim()), &Device::Cpu)?;
            let (_, out) = net.forward(&x)?;
            let loss = (out - y)?.sqr()?.sum(1)?.mean_all()?;
            final_loss = loss.to_scalar::<f32>()? as f64;
            opt.step(&loss.backward()?)?;
        }
        log::info!("post-hoc encoder final loss {final_loss:.4}");
        Ok(Self { net, final_loss })
    }
}

impl Representation for PosthocEncoder {
    fn encode(&mut self, images: &ImageBatch) -> Result<Vec<Vec<f64>>> {
        Ok(self.net.apply(images)?.1)
    }
}

/// The InfoGAN Q-head applied to discriminator features.
pub struct QHeadRepresentation<'a>(pub &'a ModelBundle);

impl Representation for QHeadRepresentation<'_> {
    fn encode(&mut self, images: &ImageBatch) -> Result<Vec<Vec<f64>>> {
        let b = self.0;
        let x = symmetric_pixels(images)?.to_dtype(b.dtype)?;
        let out = b.discriminator.forward(&x, None, crate::nn::Mode::Eval)?;
        Ok(b.discriminator.q_params(&out.features)?.to_dtype(DType::F64)?.to_vec2()?)
    }
}
