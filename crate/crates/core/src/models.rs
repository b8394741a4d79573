//! Generator, discriminator and Q-head networks and the training objectives
//! built on them: GAN, CGAN, InfoGAN, the original similarity-constraint GAN
//! and the modified model.
//!
//! Sign conventions: `d_loss` is minimized by the discriminator and `g_loss`
//! by the generator (and Q-head). A similarity constraint is always *added*
//! to `g_loss`, so minimizing `g_loss` minimizes the constraint. The
//! constraint never enters `d_loss`.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraint::{
    sc_modified, sc_original, subsample_pairs_with, ContributionStats, ScConfig, ScVariant,
};
use crate::error::{invalid, Error, Result};
use crate::latent::{CodeKind, CodeSpec, LatentBatch, NoiseDistribution, NoiseSpec};
use crate::nn::{
    leaky_relu, log_softmax, sigmoid, Adam, AdamConfig, BatchNorm, Conv2d, ConvTranspose2d, Linear, Mode, Params,
};
use crate::ssim::{ImageBatch, PixelRange};

/// Clamp applied to probabilities before every logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Network shapes. The generator maps `z ⊕ c` through two dense layers to a
/// `[channels.0, s/4, s/4]` map and upsamples twice; the discriminator
/// mirrors it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub image_channels: usize,
    /// Square side; must be a multiple of 4.
    pub image_size: usize,
    pub noise_dim: usize,
    #[serde(default = "default_noise_distribution")]
    pub noise_distribution: NoiseDistribution,
    pub code: CodeSpec,
    pub hidden: usize,
    /// Feature maps at the `s/4` and `s/2` resolutions.
    pub channels: (usize, usize),
    pub q_hidden: usize,
    pub leaky_slope: f64,
    /// Batch normalization after the hidden layers of G and after `conv2`
    /// and `fc` of D.
    #[serde(default = "default_batch_norm")]
    pub batch_norm: bool,
}

fn default_batch_norm() -> bool {
    true
}

fn default_noise_distribution() -> NoiseDistribution {
    NoiseDistribution::Uniform
}

impl Architecture {
    /// The 28×28 layout: dense 1024, dense 7·7·128, 64 maps, 1 channel.
    pub fn mnist() -> Self {
        Self {
            image_channels: 1,
            image_size: 28,
            noise_dim: 62,
            noise_distribution: NoiseDistribution::Uniform,
            code: CodeSpec::discrete(10),
            hidden: 1024,
            channels: (128, 64),
            q_hidden: 128,
            leaky_slope: 0.1,
            batch_norm: true,
        }
    }

    /// Same pattern for arbitrary square images.
    pub fn for_images(channels: usize, size: usize, noise_dim: usize, code: CodeSpec) -> Self {
        Self {
            image_channels: channels,
            image_size: size,
            noise_dim,
            code,
            ..Self::mnist()
        }
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec {
            dim: self.noise_dim,
            distribution: self.noise_distribution,
        }
    }

    pub fn code_dim(&self) -> usize {
        self.code.dim()
    }

    pub fn base(&self) -> usize {
        self.image_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        if self.image_channels == 0 || self.noise_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if self.channels.0 == 0 || self.channels.1 == 0 || self.q_hidden == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        self.code.validate()
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    fc1: Linear,
    fc2: Linear,
    up1: ConvTranspose2d,
    up2: ConvTranspose2d,
    /// One normalization per hidden layer when enabled.
    norms: Option<[BatchNorm; 3]>,
    arch: Architecture,
}

impl Generator {
    pub fn new(arch: &Architecture, rng: &mut ChaCha8Rng, dtype: DType, device: &Device) -> Result<Self> {
        let b = arch.base();
        let (c0, c1) = arch.channels;
        let norms = if arch.batch_norm {
            Some([
                BatchNorm::new(arch.hidden, dtype, device)?,
                BatchNorm::new(c0 * b * b, dtype, device)?,
                BatchNorm::new(c1, dtype, device)?,
            ])
        } else {
            None
        };
        Ok(Self {
            fc1: Linear::new(arch.noise_dim + arch.code_dim(), arch.hidden, rng, dtype, device)?,
            fc2: Linear::new(arch.hidden, c0 * b * b, rng, dtype, device)?,
            up1: ConvTranspose2d::new(c0, c1, 4, 2, 1, rng, dtype, device)?,
            up2: ConvTranspose2d::new(c1, arch.image_channels, 4, 2, 1, rng, dtype, device)?,
            norms,
            arch: arch.clone(),
        })
    }

    fn norm(&self, i: usize, x: Tensor, mode: Mode) -> Result<Tensor> {
        match &self.norms {
            Some(n) => n[i].forward(&x, mode),
            None => Ok(x),
        }
    }

    /// `[b, noise + code]` → images in `[-1, 1]`, `[b, c, s, s]`.
    pub fn forward(&self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let b = self.arch.base();
        let n = input.dims()[0];
        let h = self.norm(0, self.fc1.forward(input)?, mode)?.relu()?;
        let h = self.norm(1, self.fc2.forward(&h)?, mode)?.relu()?;
        let h = h.reshape((n, self.arch.channels.0, b, b))?;
        let h = self.norm(2, self.up1.forward(&h)?, mode)?.relu()?;
        Ok(self.up2.forward(&h)?.tanh()?)
    }

    pub fn params(&self) -> Params {
        let mut p = Params::default();
        p.extend("fc1.", &self.fc1.params());
        p.extend("fc2.", &self.fc2.params());
        p.extend("up1.", &self.up1.params());
        p.extend("up2.", &self.up2.params());
        if let Some(n) = &self.norms {
            for (i, bn) in n.iter().enumerate() {
                p.extend(&format!("bn{}.", i + 1), &bn.params());
            }
        }
        p
    }

    /// Running normalization statistics.
    pub fn buffers(&self) -> Params {
        let mut p = Params::default();
        if let Some(n) = &self.norms {
            for (i, bn) in n.iter().enumerate() {
                p.extend(&format!("bn{}.", i + 1), &bn.buffers());
            }
        }
        p
    }
}

#[derive(Debug, Clone)]
pub struct QHead {
    fc: Linear,
    out: Linear,
}

impl QHead {
    pub fn params(&self) -> Params {
        let mut p = Params::default();
        p.extend("fc.", &self.fc.params());
        p.extend("out.", &self.out.params());
        p
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    conv1: Conv2d,
    conv2: Conv2d,
    fc: Linear,
    head: Linear,
    /// After `conv2` and `fc` when enabled.
    norms: Option<[BatchNorm; 2]>,
    q: Option<QHead>,
    conditional: bool,
    arch: Architecture,
}

pub struct DiscriminatorOutput {
    pub logits: Tensor,
    /// Penultimate activations, `[b, hidden]`.
    pub features: Tensor,
}

impl Discriminator {
    pub fn new(
        arch: &Architecture,
        conditional: bool,
        with_q: bool,
        rng: &mut ChaCha8Rng,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let b = arch.base();
        let (c0, c1) = arch.channels;
        let in_ch = arch.image_channels + if conditional { arch.code_dim() } else { 0 };
        let conv1 = Conv2d::new(in_ch, c1, 4, 2, 1, rng, dtype, device)?;
        let conv2 = Conv2d::new(c1, c0, 4, 2, 1, rng, dtype, device)?;
        let fc = Linear::new(c0 * b * b, arch.hidden, rng, dtype, device)?;
        let head = Linear::new(arch.hidden, 1, rng, dtype, device)?;
        let q = if with_q {
            Some(QHead {
                fc: Linear::new(arch.hidden, arch.q_hidden, rng, dtype, device)?,
                out: Linear::new(arch.q_hidden, arch.code_dim(), rng, dtype, device)?,
            })
        } else {
            None
        };
        let norms = if arch.batch_norm {
            Some([BatchNorm::new(c0, dtype, device)?, BatchNorm::new(arch.hidden, dtype, device)?])
        } else {
            None
        };
        Ok(Self {
            conv1,
            conv2,
            fc,
            head,
            norms,
            q,
            conditional,
            arch: arch.clone(),
        })
    }

    fn norm(&self, i: usize, x: Tensor, mode: Mode) -> Result<Tensor> {
        match &self.norms {
            Some(n) => n[i].forward(&x, mode),
            None => Ok(x),
        }
    }

    pub fn forward(&self, images: &Tensor, codes: Option<&Tensor>, mode: Mode) -> Result<DiscriminatorOutput> {
        let slope = self.arch.leaky_slope;
        let (n, _, h, w) = images.dims4()?;
        let x = match (self.conditional, codes) {
            (true, Some(c)) => {
                let k = c.dims()[1];
                let maps = c.reshape((n, k, 1, 1))?.broadcast_as((n, k, h, w))?;
                Tensor::cat(&[images, &maps.to_dtype(images.dtype())?], 1)?
            }
            (true, None) => return invalid("conditional discriminator needs codes"),
            (false, _) => images.clone(),
        };
        let y = leaky_relu(&self.conv1.forward(&x)?, slope)?;
        let y = leaky_relu(&self.norm(0, self.conv2.forward(&y)?, mode)?, slope)?;
        let features = leaky_relu(&self.norm(1, self.fc.forward(&y.flatten_from(1)?)?, mode)?, slope)?;
        let logits = self.head.forward(&features)?.squeeze(1)?;
        Ok(DiscriminatorOutput { logits, features })
    }

    /// Code-distribution parameters from penultimate features.
    pub fn q_params(&self, features: &Tensor) -> Result<Tensor> {
        let q = self
            .q
            .as_ref()
            .ok_or_else(|| Error::Config("discriminator has no Q-head".into()))?;
        let h = leaky_relu(&q.fc.forward(features)?, self.arch.leaky_slope)?;
        q.out.forward(&h)
    }

    pub fn has_q(&self) -> bool {
        self.q.is_some()
    }

    /// Discriminator trunk and head (no Q-head).
    pub fn params(&self) -> Params {
        let mut p = Params::default();
        p.extend("conv1.", &self.conv1.params());
        p.extend("conv2.", &self.conv2.params());
        p.extend("fc.", &self.fc.params());
        p.extend("head.", &self.head.params());
        if let Some(n) = &self.norms {
            p.extend("bn1.", &n[0].params());
            p.extend("bn2.", &n[1].params());
        }
        p
    }

    /// Running normalization statistics.
    pub fn buffers(&self) -> Params {
        let mut p = Params::default();
        if let Some(n) = &self.norms {
            p.extend("bn1.", &n[0].buffers());
            p.extend("bn2.", &n[1].buffers());
        }
        p
    }

    pub fn q_head_params(&self) -> Params {
        self.q.as_ref().map(QHead::params).unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Gan,
    Cgan,
    Infogan,
    Scgan,
    Modified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLoss {
    /// Maximize `log D(G(z, c))`.
    NonSaturating,
    /// Minimize `log(1 - D(G(z, c)))` literally.
    Minimax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    #[serde(default = "default_lambda_info")]
    pub lambda_info: f64,
    #[serde(default)]
    pub sc: Option<ScConfig>,
    #[serde(default = "default_generator_loss")]
    pub generator_loss: GeneratorLoss,
}

fn default_lambda_info() -> f64 {
    1.0
}

fn default_generator_loss() -> GeneratorLoss {
    GeneratorLoss::NonSaturating
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind) -> Self {
        let sc = match kind {
            ObjectiveKind::Scgan => Some(ScConfig::original()),
            ObjectiveKind::Modified => Some(ScConfig::modified()),
            _ => None,
        };
        Self {
            kind,
            lambda_info: 1.0,
            sc,
            generator_loss: GeneratorLoss::NonSaturating,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let needs_sc = matches!(self.kind, ObjectiveKind::Scgan | ObjectiveKind::Modified);
        match (&self.sc, needs_sc) {
            (Some(_), false) => {
                return Err(Error::Config(format!(
                    "objective {:?} takes no similarity constraint",
                    self.kind
                )))
            }
            (None, true) => {
                return Err(Error::Config(format!(
                    "objective {:?} needs a similarity constraint",
                    self.kind
                )))
            }
            _ => {}
        }
        if let Some(sc) = &self.sc {
            sc.validate()?;
            let want = if self.kind == ObjectiveKind::Scgan {
                ScVariant::Original
            } else {
                ScVariant::Modified
            };
            if sc.variant != want {
                return Err(Error::Config(format!(
                    "objective {:?} requires the {want:?} constraint variant",
                    self.kind
                )));
            }
        }
        if self.kind == ObjectiveKind::Infogan && !(self.lambda_info > 0.0) {
            return Err(Error::Config("lambda_info must be positive".into()));
        }
        Ok(())
    }

    pub fn conditional_discriminator(&self) -> bool {
        self.kind == ObjectiveKind::Cgan
    }

    pub fn uses_q_head(&self) -> bool {
        self.kind == ObjectiveKind::Infogan
    }
}

/// `mean log D(x) + mean log(1 - D(G(z)))` over clamped probabilities.
pub fn gan_value(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    if d_real.is_empty() || d_fake.is_empty() {
        return invalid("gan value needs non-empty batches");
    }
    let clamp = |p: f64| p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let real = d_real.iter().map(|&p| clamp(p).ln()).sum::<f64>() / d_real.len() as f64;
    let fake = d_fake.iter().map(|&p| (1.0 - clamp(p)).ln()).sum::<f64>() / d_fake.len() as f64;
    Ok(real + fake)
}

/// Same value as [`gan_value`] over probabilities from a discriminator that
/// was given the conditioning codes.
pub fn cgan_value(d_real_given_c: &[f64], d_fake_given_c: &[f64]) -> Result<f64> {
    gan_value(d_real_given_c, d_fake_given_c)
}

/// Parameters of `Q(c | x)` for a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum QParams {
    Probabilities(Vec<Vec<f64>>),
    Logits(Vec<Vec<f64>>),
    /// Gaussian means with a shared fixed standard deviation.
    GaussianMeans { means: Vec<Vec<f64>>, sigma: f64 },
}

/// Mean `log Q(c | x)`; the constant entropy `H(c)` is not included.
pub fn infogan_lower_bound(q: &QParams, codes: &LatentBatch) -> Result<f64> {
    let rows = match q {
        QParams::Probabilities(r) | QParams::Logits(r) => r,
        QParams::GaussianMeans { means, .. } => means,
    };
    if rows.len() != codes.batch {
        return invalid(format!("{} Q rows for {} codes", rows.len(), codes.batch));
    }
    if rows.iter().any(|r| r.len() != codes.code_dim()) {
        return invalid("Q parameter width does not match code dimension");
    }
    let per_row: Vec<f64> = match (q, codes.spec.kind) {
        (QParams::Probabilities(r), CodeKind::Discrete) => r
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let c = codes.code(i);
                c.iter().zip(p).map(|(ci, pi)| ci * pi.clamp(PROB_EPS, 1.0).ln()).sum()
            })
            .collect(),
        (QParams::Logits(r), CodeKind::Discrete) => r
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                codes.code(i).iter().zip(l).map(|(ci, li)| ci * (li - lse)).sum()
            })
            .collect(),
        (QParams::GaussianMeans { means, sigma }, CodeKind::Continuous) => {
            if !(*sigma > 0.0) {
                return invalid("gaussian sigma must be positive");
            }
            let norm = -(2.0 * std::f64::consts::PI).ln() / 2.0 - sigma.ln();
            means
                .iter()
                .enumerate()
                .map(|(i, mu)| {
                    codes
                        .code(i)
                        .iter()
                        .zip(mu)
                        .map(|(c, m)| norm - (c - m).powi(2) / (2.0 * sigma * sigma))
                        .sum()
                })
                .collect()
        }
        _ => {
            return Err(Error::Config(format!(
                "Q parameters do not match {:?} codes",
                codes.spec.kind
            )))
        }
    };
    Ok(per_row.iter().sum::<f64>() / per_row.len() as f64)
}

/// Entropy of the code prior, reported next to the lower bound.
pub fn code_entropy(spec: &CodeSpec) -> f64 {
    match spec.kind {
        CodeKind::Discrete => (spec.cardinality as f64).ln(),
        CodeKind::Continuous => spec.cardinality as f64 * (spec.range.1 - spec.range.0).ln(),
    }
}

fn clamped_log(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS)?.log()?)
}

/// Scalar diagnostics from one objective evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub sc: Option<f64>,
    pub contribution: Option<ContributionStats>,
    pub info_lower_bound: Option<f64>,
    pub d_real: Option<f64>,
    pub d_fake: Option<f64>,
}

pub struct ObjectiveOutput {
    pub d_loss: Tensor,
    pub g_loss: Tensor,
    pub diagnostics: Diagnostics,
}

/// Generator-side loss split into its parts.
pub struct GeneratorTerms {
    pub adversarial: Tensor,
    pub regularizer: Option<Tensor>,
    pub diagnostics: Diagnostics,
    /// Wall time spent building the similarity-constraint term.
    pub sc_seconds: f64,
}

impl GeneratorTerms {
    pub fn total(&self) -> Result<Tensor> {
        Ok(match &self.regularizer {
            Some(r) => (&self.adversarial + r)?,
            None => self.adversarial.clone(),
        })
    }
}

fn mean_scalar(t: &Tensor) -> Result<f64> {
    Ok(t.detach().to_dtype(DType::F64)?.mean_all()?.to_scalar::<f64>()?)
}

/// Networks, optimizers and objective for one experiment. Not `Clone`:
/// parameters are shared handles and a copy would alias them.
#[derive(Debug)]
pub struct ModelBundle {
    pub arch: Architecture,
    pub objective: ObjectiveConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub step: u64,
    pub dtype: DType,
    pub device: Device,
}

const CHECKPOINT_FORMAT: &str = "scgan-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    architecture: Architecture,
    objective: ObjectiveConfig,
    step: u64,
    dtype: String,
    opt_g: (AdamConfig, u64),
    opt_d: (AdamConfig, u64),
    extra: serde_json::Value,
}

impl ModelBundle {
    pub fn new(
        arch: Architecture,
        objective: ObjectiveConfig,
        opt_g: AdamConfig,
        opt_d: AdamConfig,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        arch.validate()?;
        objective.validate()?;
        if let Some(sc) = &objective.sc {
            if sc.code_kind != arch.code.kind {
                return Err(Error::Config(format!(
                    "constraint expects {:?} codes but the architecture uses {:?}",
                    sc.code_kind, arch.code.kind
                )));
            }
        }
        let device = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = Generator::new(&arch, &mut rng, dtype, &device)?;
        let discriminator = Discriminator::new(
            &arch,
            objective.conditional_discriminator(),
            objective.uses_q_head(),
            &mut rng,
            dtype,
            &device,
        )?;
        let mut g_params = generator.params();
        g_params.extend("q.", &discriminator.q_head_params());
        let opt_g = Adam::new(g_params.vars(), opt_g)?;
        let opt_d = Adam::new(discriminator.params().vars(), opt_d)?;
        Ok(Self {
            arch,
            objective,
            generator,
            discriminator,
            opt_g,
            opt_d,
            step: 0,
            dtype,
            device,
        })
    }

    /// Parameters updated by the generator optimizer (generator and Q-head).
    pub fn generator_side_params(&self) -> Params {
        let mut p = Params::default();
        p.extend("generator.", &self.generator.params());
        p.extend("q.", &self.discriminator.q_head_params());
        p
    }

    pub fn discriminator_params(&self) -> Params {
        let mut p = Params::default();
        p.extend("discriminator.", &self.discriminator.params());
        p
    }

    /// Generated images connected to the generator graph, normalized with
    /// batch statistics.
    pub fn generate(&self, latent: &LatentBatch) -> Result<Tensor> {
        let input = latent.generator_input(&self.device, self.dtype)?;
        self.generator.forward(&input, Mode::Train)
    }

    /// Generated images detached from any graph, normalized with running
    /// statistics.
    pub fn sample(&self, latent: &LatentBatch) -> Result<ImageBatch> {
        let input = latent.generator_input(&self.device, self.dtype)?;
        ImageBatch::new(self.generator.forward(&input, Mode::Eval)?.detach(), PixelRange::Symmetric)
    }

    /// Running normalization statistics of both networks.
    pub fn buffers(&self) -> Params {
        let mut p = Params::default();
        p.extend("generator.", &self.generator.buffers());
        p.extend("discriminator.", &self.discriminator.buffers());
        p
    }

    fn d_codes(&self, codes: Option<&Tensor>) -> Result<Option<Tensor>> {
        if !self.objective.conditional_discriminator() {
            return Ok(None);
        }
        match codes {
            Some(c) => Ok(Some(c.to_dtype(self.dtype)?)),
            None => invalid("conditional objective needs codes for every discriminator input"),
        }
    }

    /// `-(mean log D(x) + mean log(1 - D(G(z, c))))` with `fake` detached.
    pub fn discriminator_loss(
        &self,
        real: &Tensor,
        real_codes: Option<&Tensor>,
        fake: &Tensor,
        fake_codes: &Tensor,
    ) -> Result<(Tensor, Diagnostics)> {
        let rc = self.d_codes(real_codes)?;
        let fc = self.d_codes(Some(fake_codes))?;
        let d_real = sigmoid(&self.discriminator.forward(real, rc.as_ref(), Mode::Train)?.logits)?;
        let d_fake = sigmoid(&self.discriminator.forward(&fake.detach(), fc.as_ref(), Mode::Train)?.logits)?;
        let value = (clamped_log(&d_real)?.mean_all()?
            + clamped_log(&d_fake.affine(-1.0, 1.0)?)?.mean_all()?)?;
        let diagnostics = Diagnostics {
            d_real: Some(mean_scalar(&d_real)?),
            d_fake: Some(mean_scalar(&d_fake)?),
            ..Diagnostics::default()
        };
        Ok((value.neg()?, diagnostics))
    }

    /// Generator loss for `fake = G(latent)`; `pair_seed` drives the
    /// modified constraint's pair subsampling.
    pub fn generator_terms(&self, fake: &Tensor, latent: &LatentBatch, pair_seed: u64) -> Result<GeneratorTerms> {
        let codes = latent.code_tensor(&self.device, self.dtype)?;
        let fc = self.d_codes(Some(&codes))?;
        let out = self.discriminator.forward(fake, fc.as_ref(), Mode::Train)?;
        let d_fake = sigmoid(&out.logits)?;
        let adversarial = match self.objective.generator_loss {
            GeneratorLoss::NonSaturating => clamped_log(&d_fake)?.mean_all()?.neg()?,
            GeneratorLoss::Minimax => clamped_log(&d_fake.affine(-1.0, 1.0)?)?.mean_all()?,
        };
        let mut diagnostics = Diagnostics {
            d_fake: Some(mean_scalar(&d_fake)?),
            ..Diagnostics::default()
        };
        let images = || ImageBatch::new(fake.clone(), PixelRange::Symmetric);
        let sc_start = Instant::now();
        let regularizer = match self.objective.kind {
            ObjectiveKind::Gan | ObjectiveKind::Cgan => None,
            ObjectiveKind::Infogan => {
                let q = self.discriminator.q_params(&out.features)?;
                let lb = q_log_likelihood(&q, &codes, latent.spec.kind)?;
                diagnostics.info_lower_bound = Some(mean_scalar(&lb)?);
                Some((lb * -self.objective.lambda_info)?)
            }
            ObjectiveKind::Scgan => {
                let sc = self.objective.sc.as_ref().expect("validated");
                let res = sc_original(&images()?, latent, sc)?;
                diagnostics.sc = Some(res.scalar()?);
                diagnostics.contribution = Some(res.stats);
                (sc.lambda != 0.0).then(|| res.value * sc.lambda).transpose()?
            }
            ObjectiveKind::Modified => {
                let sc = self.objective.sc.as_ref().expect("validated");
                let pairs = subsample_pairs_with(latent.batch, sc.n1, sc.n2, sc.pair_scheme, pair_seed)?;
                let res = sc_modified(&images()?, latent, &pairs, sc)?;
                diagnostics.sc = Some(res.scalar()?);
                diagnostics.contribution = Some(res.stats);
                Some(res.value)
            }
        };
        let sc_seconds = if self.objective.sc.is_some() {
            sc_start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        Ok(GeneratorTerms {
            adversarial,
            regularizer,
            diagnostics,
            sc_seconds,
        })
    }

    pub fn generator_loss(&self, fake: &Tensor, latent: &LatentBatch, pair_seed: u64) -> Result<(Tensor, Diagnostics)> {
        let terms = self.generator_terms(fake, latent, pair_seed)?;
        Ok((terms.total()?, terms.diagnostics))
    }

    /// Both losses for one batch under the current parameters.
    pub fn total_objective(
        &self,
        real: &Tensor,
        real_codes: Option<&Tensor>,
        latent: &LatentBatch,
        pair_seed: u64,
    ) -> Result<ObjectiveOutput> {
        let fake = self.generate(latent)?;
        let codes = latent.code_tensor(&self.device, self.dtype)?;
        let (d_loss, d_diag) = self.discriminator_loss(real, real_codes, &fake, &codes)?;
        let (g_loss, mut diagnostics) = self.generator_loss(&fake, latent, pair_seed)?;
        diagnostics.d_real = d_diag.d_real;
        Ok(ObjectiveOutput {
            d_loss,
            g_loss,
            diagnostics,
        })
    }

    pub fn save_checkpoint(&self, path: &Path, extra: &serde_json::Value) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            architecture: self.arch.clone(),
            objective: self.objective.clone(),
            step: self.step,
            dtype: self.dtype.as_str().to_string(),
            opt_g: (self.opt_g.config, self.opt_g.step),
            opt_d: (self.opt_d.config, self.opt_d.step),
            extra: extra.clone(),
        };
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (name, var) in self
            .generator_side_params()
            .iter()
            .chain(self.discriminator_params().iter())
            .chain(self.buffers().iter())
        {
            tensors.push((name.clone(), var.as_tensor().clone()));
        }
        for (tag, opt) in [("opt_g", &self.opt_g), ("opt_d", &self.opt_d)] {
            for (i, (m, v)) in opt.first.iter().zip(&opt.second).enumerate() {
                tensors.push((format!("{tag}.m.{i}"), m.clone()));
                tensors.push((format!("{tag}.v.{i}"), v.clone()));
            }
        }
        let mut meta = HashMap::new();
        meta.insert("header".to_string(), serde_json::to_string(&header)?);
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        safetensors::serialize_to_file(
            tensors.iter().map(|(n, t)| (n.as_str(), t)),
            Some(meta),
            path,
        )
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(())
    }

    /// Loads a checkpoint and returns the bundle plus the caller's extra metadata.
    pub fn load_checkpoint(path: &Path) -> Result<(Self, serde_json::Value)> {
        let bytes = std::fs::read(path)?;
        let (_, metadata) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let header: CheckpointHeader = metadata
            .metadata()
            .as_ref()
            .and_then(|m| m.get("header"))
            .ok_or_else(|| Error::Checkpoint(format!("{} has no checkpoint header", path.display())))
            .and_then(|h| Ok(serde_json::from_str(h)?))?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                header.format, header.version
            )));
        }
        let dtype = match header.dtype.as_str() {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => return Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
        };
        let mut bundle = Self::new(
            header.architecture,
            header.objective,
            header.opt_g.0,
            header.opt_d.0,
            0,
            dtype,
        )?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &bundle.device)?;
        let fetch = |name: &str| -> Result<Tensor> {
            tensors
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        for (name, var) in bundle
            .generator_side_params()
            .iter()
            .chain(bundle.discriminator_params().iter())
            .chain(bundle.buffers().iter())
        {
            let t = fetch(name)?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {:?} but architecture expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t)?;
        }
        for (tag, step, opt) in [
            ("opt_g", header.opt_g.1, &mut bundle.opt_g),
            ("opt_d", header.opt_d.1, &mut bundle.opt_d),
        ] {
            let n = opt.vars().len();
            let first = (0..n).map(|i| fetch(&format!("{tag}.m.{i}"))).collect::<Result<Vec<_>>>()?;
            let second = (0..n).map(|i| fetch(&format!("{tag}.v.{i}"))).collect::<Result<Vec<_>>>()?;
            opt.restore(step, first, second)?;
        }
        bundle.step = header.step;
        Ok((bundle, header.extra))
    }
}

/// Per-sample `log Q(c | x)` averaged over the batch, as a scalar tensor.
fn q_log_likelihood(q: &Tensor, codes: &Tensor, kind: CodeKind) -> Result<Tensor> {
    Ok(match kind {
        CodeKind::Discrete => (log_softmax(q)? * codes)?.sum(1)?.mean_all()?,
        CodeKind::Continuous => {
            let norm = -(2.0 * std::f64::consts::PI).ln() / 2.0;
            (codes - q)?
                .sqr()?
                .affine(-0.5, norm)?
                .sum(1)?
                .mean_all()?
        }
    })
}
