//! The experiment engine: configuration, the alternating D/G loop,
//! JSON-lines logging, checkpoints, step timing and sample grids.
//!
//! Every random draw in a step is seeded from `(run seed, step)` and every
//! epoch permutation from `(run seed, epoch)`, so a run resumed from a
//! checkpoint replays exactly the batches and latents it would have seen.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraint::{ContributionStats, ScConfig};
use crate::data::{Dataset, DatasetId};
use crate::error::{invalid, Error, Result};
use crate::latent::{sample_latent, sample_latent_with, CodeKind, CodeSpec, LatentBatch, NoiseDistribution};
use crate::models::{Architecture, GeneratorLoss, ModelBundle, ObjectiveConfig, ObjectiveKind};
use crate::nn::AdamConfig;
use crate::ssim::ImageBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub id: DatasetId,
    /// Overrides the data root from the environment.
    #[serde(default)]
    pub root: Option<PathBuf>,
    /// Train on the first `subset` images only.
    #[serde(default)]
    pub subset: Option<usize>,
    #[serde(default = "yes")]
    pub verify_checksums: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub noise_dim: usize,
    pub noise_distribution: NoiseDistribution,
    pub code: CodeSpec,
    pub hidden: usize,
    pub channels: (usize, usize),
    pub q_hidden: usize,
    pub leaky_slope: f64,
    pub batch_norm: bool,
    pub precision: Precision,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = Architecture::mnist();
        Self {
            noise_dim: a.noise_dim,
            noise_distribution: a.noise_distribution,
            code: a.code,
            hidden: a.hidden,
            channels: a.channels,
            q_hidden: a.q_hidden,
            leaky_slope: a.leaky_slope,
            batch_norm: a.batch_norm,
            precision: Precision::F32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    pub kind: ObjectiveKind,
    #[serde(default = "one")]
    pub lambda_info: f64,
    #[serde(default = "non_saturating")]
    pub generator_loss: GeneratorLoss,
}

fn one() -> f64 {
    1.0
}

fn non_saturating() -> GeneratorLoss {
    GeneratorLoss::NonSaturating
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub kind: OptimizerKind,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            kind: OptimizerKind::Adam,
            lr_g: a.lr,
            lr_d: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

impl OptimizerSection {
    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Checkpoint every this many steps; a final checkpoint is always written.
    pub checkpoint_every: Option<u64>,
    /// Write every this many steps to the log file.
    pub log_every: u64,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<u64>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch: 32,
            seed: 0,
            checkpoint_every: None,
            log_every: 1,
            max_steps: None,
        }
    }
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    pub objective: ObjectiveSection,
    #[serde(default)]
    pub sc: Option<ScConfig>,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub run: RunSection,
}

impl TrainConfig {
    pub fn new(dataset: DatasetId, kind: ObjectiveKind) -> Self {
        Self {
            dataset: DatasetSection {
                id: dataset,
                root: None,
                subset: None,
                verify_checksums: true,
            },
            model: ModelSection::default(),
            objective: ObjectiveSection {
                kind,
                lambda_info: 1.0,
                generator_loss: GeneratorLoss::NonSaturating,
            },
            sc: ObjectiveConfig::new(kind).sc,
            optimizer: OptimizerSection::default(),
            run: RunSection::default(),
        }
    }

    /// Fills the constraint section for constraint objectives when absent.
    pub fn resolved(mut self) -> Self {
        if self.sc.is_none() {
            self.sc = ObjectiveConfig::new(self.objective.kind).sc;
        }
        self
    }

    pub fn objective_config(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            kind: self.objective.kind,
            lambda_info: self.objective.lambda_info,
            sc: self.sc.clone(),
            generator_loss: self.objective.generator_loss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.batch < 2 {
            return Err(Error::Config("run.batch must be at least 2".into()));
        }
        if self.run.epochs < 1 {
            return Err(Error::Config("run.epochs must be at least 1".into()));
        }
        if self.run.log_every == 0 || self.run.checkpoint_every == Some(0) {
            return Err(Error::Config("log and checkpoint cadences must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr_g > 0.0 && o.lr_d > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        self.model.code.validate()?;
        self.objective_config().validate()?;
        if let Some(sc) = &self.sc {
            if sc.code_kind != self.model.code.kind {
                return Err(Error::Config(format!(
                    "sc.code_kind {:?} does not match model.code.kind {:?}",
                    sc.code_kind, self.model.code.kind
                )));
            }
            if sc.variant == crate::constraint::ScVariant::Modified && sc.n1 + sc.n2 > self.run.batch {
                return Err(Error::Config(format!(
                    "sc.n1 + sc.n2 = {} exceeds run.batch {}",
                    sc.n1 + sc.n2,
                    self.run.batch
                )));
            }
        }
        Ok(())
    }

    /// Network layout for images shaped like `data`.
    pub fn architecture(&self, data: &Dataset) -> Architecture {
        let m = &self.model;
        Architecture {
            image_channels: data.shape.0,
            image_size: data.shape.1,
            noise_dim: m.noise_dim,
            noise_distribution: m.noise_distribution,
            code: m.code.clone(),
            hidden: m.hidden,
            channels: m.channels,
            q_hidden: m.q_hidden,
            leaky_slope: m.leaky_slope,
            batch_norm: m.batch_norm,
        }
    }

    pub fn data_root(&self) -> PathBuf {
        self.dataset.root.clone().unwrap_or_else(crate::data::default_data_root)
    }
}

const STREAM_LATENT: u64 = 1;
const STREAM_PAIRS: u64 = 2;
const STREAM_DATA: u64 = 3;

/// Mixes a run seed, a stream tag and an index into an independent seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut x = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Wall-clock seconds for one training step and its parts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub total: f64,
    pub forward: f64,
    pub sc: f64,
    pub backward: f64,
    pub optimizer: f64,
}

impl StepTiming {
    fn add(&mut self, o: &StepTiming) {
        self.total += o.total;
        self.forward += o.forward;
        self.sc += o.sc;
        self.backward += o.backward;
        self.optimizer += o.optimizer;
    }

    fn scale(&mut self, k: f64) {
        self.total *= k;
        self.forward *= k;
        self.sc *= k;
        self.backward *= k;
        self.optimizer *= k;
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub g_adversarial: f64,
    pub sc: Option<f64>,
    pub info_lower_bound: Option<f64>,
    pub d_real: Option<f64>,
    pub d_fake: Option<f64>,
    pub contribution: Option<ContributionStats>,
    /// Pairwise measure evaluations spent on the constraint this step.
    pub sc_pair_evaluations: usize,
    pub timing: StepTiming,
}

impl StepRecord {
    /// The record without timing, for reproducibility comparisons.
    pub fn losses(&self) -> (u64, f64, f64, Option<f64>) {
        (self.step, self.d_loss, self.g_loss, self.sc)
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn estimated_bytes(arch: &Architecture, batch: usize, dtype: DType) -> usize {
    let b = arch.base();
    let (c0, c1) = arch.channels;
    let code = arch.code_dim();
    let params = (arch.noise_dim + code) * arch.hidden
        + arch.hidden * c0 * b * b
        + c0 * c1 * 16
        + c1 * arch.image_channels * 16
        + 2 * (arch.image_channels + code) * c1 * 16
        + c1 * c0 * 16
        + c0 * b * b * arch.hidden;
    let activations = batch * (arch.hidden + c0 * b * b * 20 + c1 * 4 * b * b * 20);
    (params * 5 + activations * 4) * dtype.size_in_bytes()
}

fn available_memory() -> Option<usize> {
    let text = std::fs::read_to_string("/proc/meminfo").ok()?;
    let line = text.lines().find(|l| l.starts_with("MemAvailable:"))?;
    let kb: usize = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Owns the model, the training data and the output files for one run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub bundle: ModelBundle,
    data: Dataset,
    order: Option<(u64, Vec<usize>)>,
    out_dir: Option<PathBuf>,
    log: Option<BufWriter<File>>,
    pub last_checkpoint: Option<PathBuf>,
    pub records: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: Dataset) -> Result<Self> {
        let cfg = cfg.resolved();
        cfg.validate()?;
        let arch = Self::check_data(&cfg, &data)?;
        let dtype = cfg.model.precision.dtype();
        let need = estimated_bytes(&arch, cfg.run.batch, dtype);
        if let Some(avail) = available_memory() {
            if need > avail {
                log::warn!(
                    "estimated {} MiB needed but {} MiB available; reduce run.batch, model.hidden or model.channels",
                    need >> 20,
                    avail >> 20
                );
            }
        }
        let bundle = ModelBundle::new(
            arch,
            cfg.objective_config(),
            cfg.optimizer.adam(cfg.optimizer.lr_g),
            cfg.optimizer.adam(cfg.optimizer.lr_d),
            derive_seed(cfg.run.seed, 0, 0),
            dtype,
        )?;
        Ok(Self {
            cfg,
            bundle,
            data,
            order: None,
            out_dir: None,
            log: None,
            last_checkpoint: None,
            records: Vec::new(),
        })
    }

    /// Continues a run from `path`; the checkpoint must match `cfg`.
    pub fn from_checkpoint(cfg: TrainConfig, data: Dataset, path: &Path) -> Result<Self> {
        let mut t = Self::new(cfg, data)?;
        let (bundle, _) = ModelBundle::load_checkpoint(path)?;
        if bundle.arch != t.bundle.arch || bundle.objective != t.bundle.objective {
            return Err(Error::Checkpoint(format!(
                "{} was written for a different architecture or objective",
                path.display()
            )));
        }
        t.bundle = bundle;
        t.last_checkpoint = Some(path.to_path_buf());
        Ok(t)
    }

    fn check_data(cfg: &TrainConfig, data: &Dataset) -> Result<Architecture> {
        if data.len() < cfg.run.batch {
            return Err(Error::Config(format!(
                "{} training images cannot fill a batch of {}",
                data.len(),
                cfg.run.batch
            )));
        }
        if cfg.objective.kind == ObjectiveKind::Cgan {
            if data.labels.is_none() {
                return Err(Error::Config(format!("cgan needs labels but {} has none", data.id)));
            }
            if cfg.model.code.kind != CodeKind::Discrete || cfg.model.code.cardinality != data.classes {
                return Err(Error::Config(format!(
                    "cgan needs a discrete code with {} classes",
                    data.classes
                )));
            }
        }
        let arch = cfg.architecture(data);
        arch.validate()?;
        Ok(arch)
    }

    /// Writes the JSON-lines log and checkpoints under `dir`.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
        let file = OpenOptions::new().create(true).append(true).open(dir.join("log.jsonl"))?;
        self.log = Some(BufWriter::new(file));
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.data.len() / self.cfg.run.batch) as u64
    }

    pub fn total_steps(&self) -> u64 {
        let full = self.steps_per_epoch() * self.cfg.run.epochs as u64;
        self.cfg.run.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn epoch(&self) -> u64 {
        self.bundle.step / self.steps_per_epoch()
    }

    fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, k) = (step / spe, (step % spe) as usize);
        if self.order.as_ref().map(|o| o.0) != Some(epoch) {
            let seed = derive_seed(self.cfg.run.seed, STREAM_DATA, 0);
            self.order = Some((epoch, self.data.epoch_order(seed, epoch)));
        }
        let b = self.cfg.run.batch;
        self.order.as_ref().expect("set above").1[k * b..(k + 1) * b].to_vec()
    }

    /// Latent batch used at `step`.
    pub fn latent_for_step(&self, step: u64) -> Result<LatentBatch> {
        let arch = &self.bundle.arch;
        sample_latent(
            &arch.noise_spec(),
            &arch.code,
            self.cfg.run.batch,
            derive_seed(self.cfg.run.seed, STREAM_LATENT, step),
        )
    }

    fn abort(&self, step: u64, what: &str, value: f64) -> Error {
        let last = self
            .last_checkpoint
            .as_ref()
            .map_or("none".to_string(), |p| p.display().to_string());
        Error::TrainingFailure(format!(
            "{what} is {value} at step {step}; last good checkpoint: {last}"
        ))
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.bundle.step;
        let epoch = self.epoch();
        let start = Instant::now();
        let mut timing = StepTiming::default();
        let idx = self.batch_indices(step);
        let dtype = self.bundle.dtype;
        let dev = self.bundle.device.clone();
        let real = self.data.images(&idx, dtype, &dev)?;
        let real_codes = if self.bundle.objective.conditional_discriminator() {
            self.data.one_hot(&idx, dtype, &dev)?
        } else {
            None
        };
        let latent = self.latent_for_step(step)?;
        let pair_seed = derive_seed(self.cfg.run.seed, STREAM_PAIRS, step);

        let t = Instant::now();
        let fake = self.bundle.generate(&latent)?;
        let codes = latent.code_tensor(&dev, dtype)?;
        let (d_loss, d_diag) = self.bundle.discriminator_loss(&real, real_codes.as_ref(), &fake, &codes)?;
        let d_value = scalar(&d_loss)?;
        timing.forward += t.elapsed().as_secs_f64();
        if !d_value.is_finite() {
            return Err(self.abort(step, "discriminator loss", d_value));
        }
        let t = Instant::now();
        let grads = d_loss.backward()?;
        timing.backward += t.elapsed().as_secs_f64();
        let t = Instant::now();
        self.bundle.opt_d.step(&grads)?;
        drop(grads);
        timing.optimizer += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let terms = self.bundle.generator_terms(&fake, &latent, pair_seed)?;
        let g_loss = terms.total()?;
        let g_value = scalar(&g_loss)?;
        let g_adv = scalar(&terms.adversarial)?;
        timing.sc += terms.sc_seconds;
        timing.forward += t.elapsed().as_secs_f64() - terms.sc_seconds;
        if !g_value.is_finite() {
            return Err(self.abort(step, "generator loss", g_value));
        }
        let t = Instant::now();
        let grads = g_loss.backward()?;
        timing.backward += t.elapsed().as_secs_f64();
        let t = Instant::now();
        self.bundle.opt_g.step(&grads)?;
        timing.optimizer += t.elapsed().as_secs_f64();
        self.bundle.step += 1;
        timing.total = start.elapsed().as_secs_f64();

        let diag = terms.diagnostics;
        let record = StepRecord {
            step,
            epoch,
            d_loss: d_value,
            g_loss: g_value,
            g_adversarial: g_adv,
            sc: diag.sc,
            info_lower_bound: diag.info_lower_bound,
            d_real: d_diag.d_real,
            d_fake: d_diag.d_fake,
            sc_pair_evaluations: diag.contribution.as_ref().map_or(0, |c| c.pair_evaluations),
            contribution: diag.contribution,
            timing,
        };
        if let Some(w) = self.log.as_mut() {
            if step % self.cfg.run.log_every == 0 {
                serde_json::to_writer(&mut *w, &record)?;
                w.write_all(b"\n")?;
            }
        }
        if let Some(every) = self.cfg.run.checkpoint_every {
            if self.bundle.step % every == 0 && self.out_dir.is_some() {
                self.save_checkpoint(None)?;
            }
        }
        self.records.push(record.clone());
        Ok(record)
    }

    /// Saves to `path`, or to `checkpoints/step-<n>.safetensors` in the output directory.
    pub fn save_checkpoint(&mut self, path: Option<&Path>) -> Result<PathBuf> {
        let path = match (path, &self.out_dir) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(dir)) => dir
                .join("checkpoints")
                .join(format!("step-{:08}.safetensors", self.bundle.step)),
            (None, None) => return invalid("no checkpoint path and no output directory"),
        };
        if let Some(w) = self.log.as_mut() {
            w.flush()?;
        }
        let extra = serde_json::json!({ "train_config": self.cfg });
        self.bundle.save_checkpoint(&path, &extra)?;
        self.last_checkpoint = Some(path.clone());
        Ok(path)
    }

    /// Runs to the configured end. `on_epoch` sees the bundle after each
    /// completed epoch.
    pub fn run(&mut self, mut on_epoch: impl FnMut(u64, &ModelBundle) -> Result<()>) -> Result<()> {
        let total = self.total_steps();
        let spe = self.steps_per_epoch();
        while self.bundle.step < total {
            let r = self.step()?;
            if r.step % 100 == 0 {
                log::info!(
                    "step {} epoch {}: d_loss {:.4} g_loss {:.4} sc {:?}",
                    r.step,
                    r.epoch,
                    r.d_loss,
                    r.g_loss,
                    r.sc
                );
            }
            if self.bundle.step % spe == 0 {
                if let Some(w) = self.log.as_mut() {
                    w.flush()?;
                }
                on_epoch(self.bundle.step / spe, &self.bundle)?;
            }
        }
        if let Some(w) = self.log.as_mut() {
            w.flush()?;
        }
        Ok(())
    }

    pub fn into_parts(self) -> (ModelBundle, Vec<StepRecord>) {
        (self.bundle, self.records)
    }
}

/// Trains from scratch; with `out_dir` set, writes the log plus a final checkpoint.
pub fn train_model(cfg: TrainConfig, data: Dataset, out_dir: Option<&Path>) -> Result<(ModelBundle, Vec<StepRecord>)> {
    let mut t = Trainer::new(cfg, data)?;
    if let Some(dir) = out_dir {
        t = t.with_output(dir)?;
    }
    t.run(|_, _| Ok(()))?;
    if let Some(dir) = out_dir {
        t.save_checkpoint(Some(&dir.join("final.safetensors")))?;
    }
    Ok(t.into_parts())
}

/// Mean step time over `measured` steps after `warmup` discarded steps.
pub fn measure_step_time(cfg: &TrainConfig, data: &Dataset, warmup: usize, measured: usize) -> Result<StepTiming> {
    if measured < 10 {
        return invalid(format!("need at least 10 measured steps, got {measured}"));
    }
    let mut cfg = cfg.clone();
    cfg.run.max_steps = None;
    cfg.run.checkpoint_every = None;
    cfg.run.epochs = cfg.run.epochs.max(warmup + measured);
    let mut t = Trainer::new(cfg, data.clone())?;
    for _ in 0..warmup {
        t.step()?;
    }
    let mut sum = StepTiming::default();
    for _ in 0..measured {
        sum.add(&t.step()?.timing);
    }
    sum.scale(1.0 / measured as f64);
    Ok(sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridMode {
    /// Each column shares one code; rows vary the noise.
    FixCPerColumn,
    /// Each row shares one noise vector; columns step one continuous slot.
    #[serde(alias = "sweep")]
    FixZPerRowSweepC,
}

impl std::str::FromStr for GridMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::InvalidArgument(format!("unknown grid mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub mode: GridMode,
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
    /// Continuous slot swept in sweep mode.
    #[serde(default)]
    pub slot: usize,
}

pub const GRID_PADDING: usize = 2;

/// Latents for a grid in row-major order.
pub fn grid_latents(arch: &Architecture, spec: &GridSpec) -> Result<LatentBatch> {
    if spec.rows == 0 || spec.cols == 0 {
        return invalid(format!("grid dimensions must be positive, got {}×{}", spec.rows, spec.cols));
    }
    let code = &arch.code;
    let n = spec.rows * spec.cols;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut latent = sample_latent_with(&arch.noise_spec(), code, n, &mut rng)?;
    let kd = code.dim();
    let nd = arch.noise_dim;
    match spec.mode {
        GridMode::FixCPerColumn => {
            let column_codes = sample_latent_with(&arch.noise_spec(), code, spec.cols, &mut rng)?;
            for r in 0..spec.rows {
                for c in 0..spec.cols {
                    let i = r * spec.cols + c;
                    let value = match code.kind {
                        CodeKind::Discrete => code.one_hot(c % code.cardinality),
                        CodeKind::Continuous => column_codes.code(c).to_vec(),
                    };
                    latent.c[i * kd..(i + 1) * kd].copy_from_slice(&value);
                }
            }
        }
        GridMode::FixZPerRowSweepC => {
            if code.kind != CodeKind::Continuous {
                return Err(Error::Config("continuous code required for sweep mode".into()));
            }
            if spec.slot >= code.cardinality {
                return invalid(format!("slot {} out of range for {} slots", spec.slot, code.cardinality));
            }
            if spec.cols < 2 {
                return invalid("sweep mode needs at least 2 columns");
            }
            let (lo, hi) = code.range;
            for r in 0..spec.rows {
                let base = r * spec.cols;
                let z = latent.z[base * nd..(base + 1) * nd].to_vec();
                let c0 = latent.c[base * kd..(base + 1) * kd].to_vec();
                for t in 0..spec.cols {
                    let i = base + t;
                    latent.z[i * nd..(i + 1) * nd].copy_from_slice(&z);
                    latent.c[i * kd..(i + 1) * kd].copy_from_slice(&c0);
                    latent.c[i * kd + spec.slot] = lo + (hi - lo) * t as f64 / (spec.cols - 1) as f64;
                }
            }
        }
    }
    Ok(latent)
}

/// Tiles a batch of images into one picture with [`GRID_PADDING`] pixels of
/// black between tiles.
pub fn render_grid(images: &ImageBatch, rows: usize, cols: usize) -> Result<image::DynamicImage> {
    if images.len() != rows * cols {
        return invalid(format!("{} images for a {rows}×{cols} grid", images.len()));
    }
    let (c, h, w) = images.image_shape();
    if c != 1 && c != 3 {
        return invalid(format!("cannot render {c}-channel images"));
    }
    let px: Vec<f64> = images.unit_pixels()?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let gw = cols * (w + GRID_PADDING) + GRID_PADDING;
    let gh = rows * (h + GRID_PADDING) + GRID_PADDING;
    let mut buf = vec![0u8; gw * gh * c];
    for i in 0..rows * cols {
        let (r, col) = (i / cols, i % cols);
        let (oy, ox) = (GRID_PADDING + r * (h + GRID_PADDING), GRID_PADDING + col * (w + GRID_PADDING));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = px[((i * c + ch) * h + y) * w + x];
                    buf[((oy + y) * gw + ox + x) * c + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
    }
    Ok(if c == 1 {
        image::DynamicImage::ImageLuma8(image::GrayImage::from_raw(gw as u32, gh as u32, buf).expect("sized"))
    } else {
        image::DynamicImage::ImageRgb8(image::RgbImage::from_raw(gw as u32, gh as u32, buf).expect("sized"))
    })
}

/// Generates the grid described by `spec` and writes it as a PNG.
pub fn emit_sample_grid(bundle: &ModelBundle, spec: &GridSpec, path: &Path) -> Result<()> {
    let latent = grid_latents(&bundle.arch, spec)?;
    let mut chunks = Vec::new();
    let n = latent.batch;
    let mut start = 0;
    while start < n {
        let len = 128.min(n - start);
        let part = LatentBatch::from_parts(
            latent.z[start * latent.noise_dim..(start + len) * latent.noise_dim].to_vec(),
            latent.c[start * latent.code_dim()..(start + len) * latent.code_dim()].to_vec(),
            latent.noise_dim,
            latent.spec.clone(),
        )?;
        chunks.push(bundle.sample(&part)?.pixels);
        start += len;
    }
    let images = ImageBatch::new(Tensor::cat(&chunks, 0)?, crate::ssim::PixelRange::Symmetric)?;
    render_grid(&images, spec.rows, spec.cols)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(e))?;
    Ok(())
}
