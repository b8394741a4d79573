use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use scgan_core::data::{ingest_dataset, DatasetSplits, IngestOptions, SyntheticFactors};
use scgan_core::latent::{sample_latent, LatentBatch};
use scgan_core::metrics::extractor::{cached_feature_extractor, raw_pixel_features};
use scgan_core::metrics::factor::{
    factorvae_score, synthetic_identity, EncoderConfig, FactorVaeConfig, GanFactorSource, PosthocEncoder,
    QHeadRepresentation, Representation,
};
use scgan_core::metrics::{fid, parzen_loglik, ExtractorConfig, FeatureExtractorId, FidConfig, MetricReport, ParzenConfig};
use scgan_core::models::ModelBundle;
use scgan_core::ssim::{ImageBatch, PixelRange};
use scgan_core::train::{emit_sample_grid, measure_step_time, GridMode, GridSpec, TrainConfig, Trainer};

use crate::config::{load_config, ExperimentManifest, OutputLock};
use crate::{CliError, FactorSourceArg, Metric};

fn with_root(mut cfg: TrainConfig, root: Option<PathBuf>) -> TrainConfig {
    if cfg.dataset.root.is_none() {
        cfg.dataset.root = root;
    }
    cfg
}

fn load_splits(cfg: &TrainConfig) -> Result<DatasetSplits, CliError> {
    let opts = IngestOptions {
        verify_checksums: cfg.dataset.verify_checksums,
        limit: None,
    };
    let mut splits = ingest_dataset(cfg.dataset.id, &cfg.data_root(), &opts)?;
    if let Some(n) = cfg.dataset.subset {
        splits.train = splits.train.take(n);
    }
    Ok(splits)
}

fn write_grids(bundle: &ModelBundle, dir: &Path, seed: u64) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    let cols = match bundle.arch.code.kind {
        scgan_core::latent::CodeKind::Discrete => bundle.arch.code.cardinality.min(20),
        scgan_core::latent::CodeKind::Continuous => 10,
    };
    let mut specs = vec![(GridMode::FixCPerColumn, "grid-fix-c.png")];
    if bundle.arch.code.kind == scgan_core::latent::CodeKind::Continuous {
        specs.push((GridMode::FixZPerRowSweepC, "grid-sweep-c.png"));
    }
    for (mode, name) in specs {
        let spec = GridSpec {
            mode,
            rows: 10,
            cols,
            seed,
            slot: 0,
        };
        let path = dir.join(name);
        emit_sample_grid(bundle, &spec, &path)?;
        out.push(path);
    }
    Ok(out)
}

pub fn train(
    config: &Path,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
    overrides: &[String],
    root: Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = with_root(load_config(config, overrides)?, root);
    let out = out.unwrap_or_else(|| {
        let stem = config.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
        PathBuf::from("runs").join(stem)
    });
    let _lock = OutputLock::acquire(&out)?;
    let manifest = ExperimentManifest::new(config, &out, &cfg);
    let mpath = manifest.write(&out)?;
    println!("manifest: {} (config hash {})", mpath.display(), manifest.config_hash);
    let splits = load_splits(&cfg)?;
    let seed = cfg.run.seed;
    let trainer = match &resume {
        Some(p) => Trainer::from_checkpoint(cfg, splits.train, p)?,
        None => Trainer::new(cfg, splits.train)?,
    };
    let mut trainer = trainer.with_output(&out)?;
    let grids = out.join("grids");
    std::fs::create_dir_all(&grids)?;
    trainer.run(|epoch, bundle| {
        let spec = GridSpec {
            mode: GridMode::FixCPerColumn,
            rows: 10,
            cols: bundle.arch.code.cardinality.clamp(2, 20),
            seed,
            slot: 0,
        };
        emit_sample_grid(bundle, &spec, &grids.join(format!("epoch-{epoch:03}.png")))
    })?;
    let final_ckpt = trainer.save_checkpoint(Some(&out.join("final.safetensors")))?;
    println!("checkpoint: {}", final_ckpt.display());
    for g in write_grids(&trainer.bundle, &out, seed)? {
        println!("grid: {}", g.display());
    }
    if let Some(last) = trainer.records.last() {
        println!(
            "finished {} steps: d_loss {:.4} g_loss {:.4}",
            last.step + 1,
            last.d_loss,
            last.g_loss
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    pub parzen: ParzenConfig,
    pub fid: FidConfig,
    pub factor: FactorVaeConfig,
    pub encoder: EncoderConfig,
    pub extractor: ExtractorConfig,
    /// Noise coordinates treated as generator factors.
    pub noise_factors: usize,
    /// Quantization levels per continuous factor.
    pub bins: usize,
    /// Cap on test images used.
    pub test_limit: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            parzen: ParzenConfig::default(),
            fid: FidConfig::default(),
            factor: FactorVaeConfig::default(),
            encoder: EncoderConfig::default(),
            extractor: ExtractorConfig::default(),
            noise_factors: 2,
            bins: 5,
            test_limit: None,
        }
    }
}

pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    pub metric: Metric,
    pub config: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub baseline: Option<PathBuf>,
    pub source: FactorSourceArg,
    pub extractor_cache: Option<PathBuf>,
    pub data_root: Option<PathBuf>,
}

fn load_eval_config(path: Option<&Path>) -> Result<EvalConfig, CliError> {
    let Some(p) = path else {
        return Ok(EvalConfig::default());
    };
    let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
}

/// `n` generated images, produced in chunks.
fn generate(bundle: &ModelBundle, n: usize, seed: u64) -> Result<ImageBatch, CliError> {
    let mut parts = Vec::new();
    let mut done = 0;
    let mut k = 0;
    while done < n {
        let len = 500.min(n - done);
        let latent: LatentBatch = sample_latent(&bundle.arch.noise_spec(), &bundle.arch.code, len, seed.wrapping_add(k))?;
        parts.push(bundle.sample(&latent)?.pixels);
        done += len;
        k += 1;
    }
    let pixels = Tensor::cat(&parts, 0).map_err(scgan_core::Error::from)?;
    Ok(ImageBatch::new(pixels, PixelRange::Symmetric)?)
}

fn test_images(splits: &DatasetSplits, limit: Option<usize>) -> Result<ImageBatch, CliError> {
    let test = splits
        .test
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("{} has no test split", splits.train.id)))?;
    let n = limit.map_or(test.len(), |l| l.min(test.len()));
    let idx: Vec<usize> = (0..n).collect();
    Ok(test.image_batch(&idx, candle_core::DType::F32)?)
}

fn load_checkpoint(path: &Path) -> Result<(ModelBundle, TrainConfig), CliError> {
    let (bundle, extra) = ModelBundle::load_checkpoint(path)?;
    let cfg: TrainConfig = serde_json::from_value(extra["train_config"].clone())
        .map_err(|e| CliError::Usage(format!("{}: no usable training config: {e}", path.display())))?;
    Ok((bundle, cfg))
}

fn check_shape(bundle: &ModelBundle, splits: &DatasetSplits) -> Result<(), CliError> {
    let (c, h, w) = splits.train.shape;
    let a = &bundle.arch;
    if c != a.image_channels || h != a.image_size || w != a.image_size {
        return Err(CliError::Usage(format!(
            "checkpoint generates {}×{}×{} images but {} has {c}×{h}×{w}",
            a.image_channels, a.image_size, a.image_size, splits.train.id
        )));
    }
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let ecfg = load_eval_config(args.config.as_deref())?;
    if let (Metric::Factor, FactorSourceArg::Synthetic) = (args.metric, args.source) {
        let mut src = SyntheticFactors::default();
        let mut repr = synthetic_identity(src);
        let r = factorvae_score(&mut src, &mut repr, &ecfg.factor, ecfg.seed)?;
        let mut report = MetricReport::new(
            "factorvae_score",
            r.score,
            None,
            serde_json::json!({ "factor": ecfg.factor, "source": "synthetic", "representation": "identity" }),
            ecfg.seed,
        )?;
        report.details = serde_json::to_value(&r).expect("serializable");
        println!("factorvae_score: {:?}", r.score);
        if let Some(p) = &args.report {
            report.write(p)?;
            println!("report: {}", p.display());
        }
        return Ok(());
    }
    let ckpt = args
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Usage("--checkpoint is required for this metric".into()))?;
    let (bundle, tcfg) = load_checkpoint(ckpt)?;
    let tcfg = with_root(tcfg, args.data_root.clone());
    let report_path = args.report.clone().unwrap_or_else(|| {
        let dir = ckpt.parent().unwrap_or(Path::new("."));
        let name = match args.metric {
            Metric::Parzen => "parzen",
            Metric::Fid => "fid",
            Metric::Factor => "factor",
        };
        dir.join(format!("report-{name}.json"))
    });
    let report_dir = report_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let report = match args.metric {
        Metric::Parzen => {
            let splits = load_splits(&tcfg)?;
            check_shape(&bundle, &splits)?;
            let gen = generate(&bundle, ecfg.parzen.sample_count, ecfg.seed)?;
            let test = test_images(&splits, ecfg.test_limit)?;
            let report = parzen_loglik(&gen, &test, &ecfg.parzen, ecfg.seed)?;
            println!("parzen_loglik: {:.2} ± {:.2}", report.value, report.uncertainty.unwrap_or(0.0));
            report
        }
        Metric::Fid => {
            let splits = load_splits(&tcfg)?;
            check_shape(&bundle, &splits)?;
            let n = ecfg.fid.sample_count;
            let gen = generate(&bundle, n, ecfg.seed)?;
            let test = test_images(&splits, Some(ecfg.test_limit.map_or(n, |l| l.min(n))))?;
            let (fr, ff, hash) = match ecfg.fid.extractor {
                FeatureExtractorId::DatasetClassifier => {
                    let cache = args.extractor_cache.clone().unwrap_or_else(|| report_dir.join("extractors"));
                    let ex = cached_feature_extractor(&splits, &ecfg.extractor, &cache)?;
                    (ex.features(&test)?, ex.features(&gen)?, Some(ex.content_hash))
                }
                FeatureExtractorId::RawPixels => (raw_pixel_features(&test)?, raw_pixel_features(&gen)?, None),
            };
            let value = fid(&fr, &ff)?;
            let mut report = MetricReport::new(
                "fid",
                value,
                None,
                serde_json::json!({ "fid": ecfg.fid, "extractor": ecfg.extractor }),
                ecfg.seed,
            )?;
            report.extractor_hash = hash;
            if let Some(b) = &args.baseline {
                let base = MetricReport::read(b)?;
                if base.extractor_hash != report.extractor_hash {
                    eprintln!(
                        "warning: extractor hash differs from {}; FID values are not comparable",
                        b.display()
                    );
                }
            }
            println!("fid: {:.4}", value);
            report
        }
        Metric::Factor => {
            let mut source = GanFactorSource::new(&bundle, ecfg.noise_factors, ecfg.bins)?;
            let (r, how) = if bundle.discriminator.has_q() {
                let mut repr = QHeadRepresentation(&bundle);
                (factorvae_score(&mut source, &mut repr, &ecfg.factor, ecfg.seed)?, "q-head")
            } else {
                let mut enc = PosthocEncoder::train(&source, &ecfg.encoder, ecfg.seed)?;
                let repr: &mut dyn Representation = &mut enc;
                (factorvae_score(&mut source, repr, &ecfg.factor, ecfg.seed)?, "post-hoc-encoder")
            };
            let mut report = MetricReport::new(
                "factorvae_score",
                r.score,
                None,
                serde_json::json!({ "factor": ecfg.factor, "encoder": ecfg.encoder, "representation": how,
                    "noise_factors": ecfg.noise_factors, "bins": ecfg.bins }),
                ecfg.seed,
            )?;
            report.details = serde_json::to_value(&r).expect("serializable");
            println!("factorvae_score: {:?}", r.score);
            report
        }
    };
    if !report_dir.as_os_str().is_empty() {
        std::fs::create_dir_all(&report_dir)?;
    }
    report.write(&report_path)?;
    println!("report: {}", report_path.display());
    Ok(())
}

pub fn grid(
    checkpoint: &Path,
    mode: &str,
    rows: usize,
    cols: usize,
    seed: u64,
    slot: usize,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let mode: GridMode = mode.parse()?;
    let (bundle, _) = ModelBundle::load_checkpoint(checkpoint)?;
    let spec = GridSpec {
        mode,
        rows,
        cols,
        seed,
        slot,
    };
    let path = out.unwrap_or_else(|| {
        let dir = checkpoint.parent().unwrap_or(Path::new("."));
        let tag = match mode {
            GridMode::FixCPerColumn => "fix-c",
            GridMode::FixZPerRowSweepC => "sweep-c",
        };
        dir.join(format!("grid-{tag}-{rows}x{cols}-seed{seed}.png"))
    });
    emit_sample_grid(&bundle, &spec, &path)?;
    println!("{}", path.display());
    Ok(())
}

pub fn timing(
    config: &Path,
    warmup: usize,
    measured: usize,
    overrides: &[String],
    root: Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = with_root(load_config(config, overrides)?, root);
    let splits = load_splits(&cfg)?;
    let t = measure_step_time(&cfg, &splits.train, warmup, measured)?;
    println!("{}", serde_json::to_string_pretty(&t).expect("serializable"));
    Ok(())
}
