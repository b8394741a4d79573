use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetId, DatasetSplits};
use crate::error::{invalid, Error, Result};
use crate::nn::{log_softmax, Adam, AdamConfig, Conv2d, Linear, Params};
use crate::ssim::{ImageBatch, PixelRange};

/// Two stride-2 convolutions, a dense feature layer and a linear output.
#[derive(Debug, Clone)]
pub struct ConvNet {
    conv1: Conv2d,
    conv2: Conv2d,
    fc: Linear,
    out: Linear,
    pub channels: usize,
    pub size: usize,
}

impl ConvNet {
    pub fn new(channels: usize, size: usize, feature_dim: usize, outputs: usize, seed: u64) -> Result<Self> {
        if size == 0 || size % 4 != 0 {
            return invalid(format!("image size {size} must be a positive multiple of 4"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dev = Device::Cpu;
        let q = size / 4;
        Ok(Self {
            conv1: Conv2d::new(channels, 32, 4, 2, 1, &mut rng, DType::F32, &dev)?,
            conv2: Conv2d::new(32, 64, 4, 2, 1, &mut rng, DType::F32, &dev)?,
            fc: Linear::new(64 * q * q, feature_dim, &mut rng, DType::F32, &dev)?,
            out: Linear::new(feature_dim, outputs, &mut rng, DType::F32, &dev)?,
            channels,
            size,
        })
    }

    /// Returns `(features, outputs)` for images in `[-1, 1]`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.conv1.forward(x)?.relu()?;
        let h = self.conv2.forward(&h)?.relu()?;
        let f = self.fc.forward(&h.flatten_from(1)?)?.relu()?;
        let o = self.out.forward(&f)?;
        Ok((f, o))
    }

    pub fn params(&self) -> Params {
        let mut p = Params::default();
        p.extend("conv1.", &self.conv1.params());
        p.extend("conv2.", &self.conv2.params());
        p.extend("fc.", &self.fc.params());
        p.extend("out.", &self.out.params());
        p
    }

    /// SHA-256 over parameter names and little-endian values.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.params().iter() {
            h.update(name.as_bytes());
            let v: Vec<f32> = var.as_tensor().flatten_all()?.to_vec1()?;
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    fn check_input(&self, images: &ImageBatch) -> Result<()> {
        let (c, h, w) = images.image_shape();
        if c != self.channels || h != self.size || w != self.size {
            return invalid(format!(
                "network expects {}×{}×{} images, got {c}×{h}×{w}",
                self.channels, self.size, self.size
            ));
        }
        Ok(())
    }

    /// Runs the network in chunks, returning `(features, outputs)` rows.
    pub fn apply(&self, images: &ImageBatch) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        self.check_input(images)?;
        let x = symmetric_pixels(images)?.to_dtype(DType::F32)?;
        let mut feats = Vec::with_capacity(images.len());
        let mut outs = Vec::with_capacity(images.len());
        let mut start = 0;
        while start < images.len() {
            let len = EVAL_CHUNK.min(images.len() - start);
            let (f, o) = self.forward(&x.narrow(0, start, len)?)?;
            feats.extend(f.to_dtype(DType::F64)?.to_vec2::<f64>()?);
            outs.extend(o.to_dtype(DType::F64)?.to_vec2::<f64>()?);
            start += len;
        }
        Ok((feats, outs))
    }

    pub fn save(&self, path: &Path, metadata: HashMap<String, String>) -> Result<()> {
        let tensors: Vec<(String, Tensor)> =
            self.params().iter().map(|(n, v)| (n.clone(), v.as_tensor().clone())).collect();
        safetensors::serialize_to_file(tensors.iter().map(|(n, t)| (n.as_str(), t)), Some(metadata), path)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    /// Overwrites parameters with tensors stored by [`ConvNet::save`].
    pub fn load_into(&self, path: &Path) -> Result<HashMap<String, String>> {
        let bytes = std::fs::read(path)?;
        let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        for (name, var) in self.params().iter() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing {name}", path.display())))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!("{}: shape mismatch for {name}", path.display())));
            }
            var.set(t)?;
        }
        Ok(meta.metadata().clone().unwrap_or_default())
    }
}

const EVAL_CHUNK: usize = 500;

/// Pixels of `images` mapped to `[-1, 1]`.
pub fn symmetric_pixels(images: &ImageBatch) -> Result<Tensor> {
    Ok(match images.range {
        PixelRange::Symmetric => images.pixels.clone(),
        PixelRange::Unit => images.pixels.affine(2.0, -1.0)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Cap on training images.
    pub train_limit: Option<usize>,
    /// Required test accuracy; `None` uses the per-dataset floor.
    pub min_accuracy: Option<f64>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch: 64,
            lr: 1e-3,
            seed: 0,
            train_limit: None,
            min_accuracy: None,
        }
    }
}

pub const FEATURE_DIM: usize = 128;

/// Test-accuracy floor for a dataset's feature extractor.
pub fn accuracy_floor(id: DatasetId) -> f64 {
    match id {
        DatasetId::Mnist => 0.98,
        DatasetId::FashionMnist => 0.88,
        _ => 0.0,
    }
}

/// Classifier whose penultimate layer provides FID features.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub net: ConvNet,
    pub dataset: DatasetId,
    pub accuracy: f64,
    pub content_hash: String,
}

impl FeatureExtractor {
    pub fn features(&self, images: &ImageBatch) -> Result<Vec<Vec<f64>>> {
        Ok(self.net.apply(images)?.0)
    }

    pub fn accuracy_on(&self, images: &ImageBatch, labels: &[usize]) -> Result<f64> {
        let (_, logits) = self.net.apply(images)?;
        let correct = logits
            .iter()
            .zip(labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        Ok(correct as f64 / labels.len().max(1) as f64)
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Trains the classifier with Adam and checks the accuracy floor on the test split.
pub fn train_feature_extractor(splits: &DatasetSplits, cfg: &ExtractorConfig) -> Result<FeatureExtractor> {
    let train = match cfg.train_limit {
        Some(n) => splits.train.take(n),
        None => splits.train.clone(),
    };
    let test = splits
        .test
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{} has no test split for the extractor", train.id)))?;
    if train.labels.is_none() {
        return Err(Error::Config(format!("{} has no labels", train.id)));
    }
    if cfg.batch == 0 || cfg.epochs == 0 || train.len() < cfg.batch {
        return invalid("extractor needs epochs ≥ 1 and at least one full batch");
    }
    let (c, h, _) = train.shape;
    let net = ConvNet::new(c, h, FEATURE_DIM, train.classes, cfg.seed)?;
    let mut opt = Adam::new(
        net.params().vars(),
        AdamConfig {
            lr: cfg.lr,
            beta1: 0.9,
            ..AdamConfig::default()
        },
    )?;
    let dev = Device::Cpu;
    let steps = train.len() / cfg.batch;
    for epoch in 0..cfg.epochs {
        let order = train.epoch_order(cfg.seed, epoch as u64);
        let mut total = 0.0;
        for s in 0..steps {
            let idx = &order[s * cfg.batch..(s + 1) * cfg.batch];
            let x = train.images(idx, DType::F32, &dev)?;
            let y = train.one_hot(idx, DType::F32, &dev)?.expect("labels checked");
            let (_, logits) = net.forward(&x)?;
            let loss = (log_softmax(&logits)? * y)?.sum(1)?.mean_all()?.neg()?;
            total += loss.to_scalar::<f32>()? as f64;
            opt.step(&loss.backward()?)?;
        }
        log::info!("extractor epoch {epoch}: mean loss {:.4}", total / steps as f64);
    }
    let all: Vec<usize> = (0..test.len()).collect();
    let mut extractor = FeatureExtractor {
        content_hash: net.content_hash()?,
        net,
        dataset: train.id,
        accuracy: 0.0,
    };
    extractor.accuracy = extractor.accuracy_on(
        &test.image_batch(&all, DType::F32)?,
        test.labels.as_ref().expect("labelled test split"),
    )?;
    let floor = cfg.min_accuracy.unwrap_or_else(|| accuracy_floor(train.id));
    log::info!("extractor test accuracy {:.4} (floor {floor})", extractor.accuracy);
    if extractor.accuracy < floor {
        return Err(Error::TrainingFailure(format!(
            "feature extractor reached {:.4} test accuracy on {} after {} epochs, below the {floor} floor",
            extractor.accuracy, train.id, cfg.epochs
        )));
    }
    Ok(extractor)
}

pub fn extractor_cache_path(dir: &Path, dataset: DatasetId, cfg: &ExtractorConfig) -> PathBuf {
    let key = serde_json::to_string(cfg).unwrap_or_default();
    let tag = &crate::data::sha256_hex(key.as_bytes())[..12];
    dir.join(format!("extractor-{dataset}-{tag}.safetensors"))
}

/// Loads the extractor cached under `dir`, training and caching it if absent.
pub fn cached_feature_extractor(splits: &DatasetSplits, cfg: &ExtractorConfig, dir: &Path) -> Result<FeatureExtractor> {
    let id = splits.train.id;
    let path = extractor_cache_path(dir, id, cfg);
    if path.exists() {
        let (c, h, _) = splits.train.shape;
        let net = ConvNet::new(c, h, FEATURE_DIM, splits.train.classes, cfg.seed)?;
        let meta = net.load_into(&path)?;
        let hash = net.content_hash()?;
        if meta.get("content_hash") == Some(&hash) {
            let accuracy = meta.get("accuracy").and_then(|a| a.parse().ok()).unwrap_or(f64::NAN);
            return Ok(FeatureExtractor {
                net,
                dataset: id,
                accuracy,
                content_hash: hash,
            });
        }
        log::warn!("{} failed its content-hash check; retraining", path.display());
    }
    let ex = train_feature_extractor(splits, cfg)?;
    std::fs::create_dir_all(dir)?;
    let meta = HashMap::from([
        ("content_hash".to_string(), ex.content_hash.clone()),
        ("accuracy".to_string(), ex.accuracy.to_string()),
        ("dataset".to_string(), id.to_string()),
    ]);
    ex.net.save(&path, meta)?;
    Ok(ex)
}

/// Images average-pooled by 4 in each direction and flattened.
pub fn raw_pixel_features(images: &ImageBatch) -> Result<Vec<Vec<f64>>> {
    let x = symmetric_pixels(images)?.to_dtype(DType::F64)?;
    let (b, c, h, w) = x.dims4()?;
    if h % 4 != 0 || w % 4 != 0 {
        return invalid("raw-pixel features need sides divisible by 4");
    }
    let pooled = x.reshape((b, c, h / 4, 4, w / 4, 4))?.mean(5)?.mean(3)?;
    Ok(pooled.flatten_from(1)?.to_vec2()?)
}
