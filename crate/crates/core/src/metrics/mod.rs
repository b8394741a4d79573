//! Evaluation metrics: Gaussian Parzen-window log-likelihood, Fréchet
//! distance on classifier features, and the FactorVAE disentanglement score.

pub mod extractor;
pub mod factor;
pub mod fid;
pub mod parzen;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::constraint::all_pairs;
use crate::error::{invalid, Error, Result};
use crate::ssim::{ssim_pairs, ImageBatch, SsimConfig};

pub use extractor::{
    cached_feature_extractor, raw_pixel_features, train_feature_extractor, ExtractorConfig, FeatureExtractor,
};
pub use factor::{factorvae_score, FactorSource, FactorVaeConfig, FactorVaeResult, Representation};
pub use fid::{fid, fid_from_moments, GaussianMoments};
pub use parzen::{parzen_estimate, ParzenConfig, ParzenResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureExtractorId {
    DatasetClassifier,
    RawPixels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FidConfig {
    pub extractor: FeatureExtractorId,
    pub sample_count: usize,
}

impl Default for FidConfig {
    fn default() -> Self {
        Self {
            extractor: FeatureExtractorId::DatasetClassifier,
            sample_count: 10_000,
        }
    }
}

/// One evaluation result, written as a JSON manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub uncertainty: Option<f64>,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: u64,
    pub extractor_hash: Option<String>,
    #[serde(default)]
    pub details: serde_json::Value,
}

impl MetricReport {
    pub fn new(metric: &str, value: f64, uncertainty: Option<f64>, config: serde_json::Value, seed: u64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::Numerical(format!("{metric} evaluated to {value}")));
        }
        if uncertainty.is_some_and(|u| !(u >= 0.0)) {
            return invalid("uncertainty must be non-negative");
        }
        let config_hash = crate::data::sha256_hex(serde_json::to_string(&config)?.as_bytes());
        Ok(Self {
            metric: metric.to_string(),
            value,
            uncertainty,
            config,
            config_hash,
            seed,
            extractor_hash: None,
            details: serde_json::Value::Null,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Parzen estimate on `[0, 1]` pixels, as a report.
pub fn parzen_loglik(generated: &ImageBatch, test: &ImageBatch, cfg: &ParzenConfig, seed: u64) -> Result<MetricReport> {
    let flat = |b: &ImageBatch| -> Result<Vec<Vec<f64>>> {
        Ok(b.unit_pixels()?.flatten_from(1)?.to_dtype(candle_core::DType::F64)?.to_vec2()?)
    };
    let r = parzen_estimate(&flat(generated)?, &flat(test)?, cfg)?;
    let mut report = MetricReport::new("parzen_loglik", r.mean, Some(r.sem), serde_json::to_value(cfg)?, seed)?;
    report.details = serde_json::json!({ "sigma": r.sigma, "validation": r.validation, "evaluated": r.evaluated });
    Ok(report)
}

/// Mean SSIM over same-class pairs and over different-class pairs.
pub fn intra_inter_ssim(images: &ImageBatch, classes: &[usize], cfg: &SsimConfig) -> Result<(f64, f64)> {
    if classes.len() != images.len() {
        return invalid("one class label per image required");
    }
    let pairs = all_pairs(images.len());
    let values: Vec<f64> = ssim_pairs(images, &pairs, cfg)?.to_dtype(candle_core::DType::F64)?.to_vec1()?;
    let (mut same, mut diff) = ((0.0, 0usize), (0.0, 0usize));
    for (&(i, j), v) in pairs.iter().zip(values) {
        let acc = if classes[i] == classes[j] { &mut same } else { &mut diff };
        acc.0 += v;
        acc.1 += 1;
    }
    if same.1 == 0 || diff.1 == 0 {
        return invalid("need both same-class and different-class pairs");
    }
    Ok((same.0 / same.1 as f64, diff.0 / diff.1 as f64))
}
