//! Dataset ingestion: MNIST-style IDX files, the CIFAR10 binary format, a
//! directory of CelebA JPEGs and a synthetic two-factor dataset.
//!
//! Images are held as bytes and converted to `[-1, 1]` when a batch is
//! built. If a dataset directory holds a `SHA256SUMS` file, every file read
//! from that directory must match its listed digest.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::ssim::{ImageBatch, PixelRange};

pub const DATA_ROOT_ENV: &str = "SCGAN_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetId {
    Mnist,
    FashionMnist,
    Celeba,
    Cifar10,
    SyntheticFactors,
}

impl DatasetId {
    pub fn dir_name(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::FashionMnist => "fashion-mnist",
            DatasetId::Celeba => "celeba",
            DatasetId::Cifar10 => "cifar10",
            DatasetId::SyntheticFactors => "synthetic-factors",
        }
    }
}

impl std::fmt::Display for DatasetId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// `$SCGAN_DATA_ROOT`, falling back to `~/.cache/scgan-data`.
pub fn default_data_root() -> PathBuf {
    if let Some(p) = std::env::var_os(DATA_ROOT_ENV) {
        return PathBuf::from(p);
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    home.join(".cache").join("scgan-data")
}

/// Images stored as bytes in `[c, h, w]` order, with optional class labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub id: DatasetId,
    pub shape: (usize, usize, usize),
    pub pixels: Vec<u8>,
    pub labels: Option<Vec<usize>>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(
        id: DatasetId,
        shape: (usize, usize, usize),
        pixels: Vec<u8>,
        labels: Option<Vec<usize>>,
        classes: usize,
    ) -> Result<Self> {
        let per = shape.0 * shape.1 * shape.2;
        if per == 0 || pixels.len() % per != 0 {
            return invalid(format!("{} bytes do not divide into {shape:?} images", pixels.len()));
        }
        let n = pixels.len() / per;
        if let Some(l) = &labels {
            if l.len() != n {
                return invalid(format!("{} labels for {n} images", l.len()));
            }
            if l.iter().any(|&c| c >= classes) {
                return invalid(format!("label out of range for {classes} classes"));
            }
        }
        Ok(Self {
            id,
            shape,
            pixels,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// The first `n` images.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            id: self.id,
            shape: self.shape,
            pixels: self.pixels[..n * self.image_len()].to_vec(),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
            classes: self.classes,
        }
    }

    /// Images at `indices` scaled to `[-1, 1]`, shape `[b, c, h, w]`.
    pub fn images(&self, indices: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            if i >= self.len() {
                return invalid(format!("index {i} out of range for {} images", self.len()));
            }
            data.extend(self.image_bytes(i).iter().map(|&p| p as f32 / 127.5 - 1.0));
        }
        let (c, h, w) = self.shape;
        Ok(Tensor::from_vec(data, (indices.len(), c, h, w), device)?.to_dtype(dtype)?)
    }

    pub fn image_batch(&self, indices: &[usize], dtype: DType) -> Result<ImageBatch> {
        ImageBatch::new(self.images(indices, dtype, &Device::Cpu)?, PixelRange::Symmetric)
    }

    /// One-hot labels at `indices`, or `None` for unlabeled data.
    pub fn one_hot(&self, indices: &[usize], dtype: DType, device: &Device) -> Result<Option<Tensor>> {
        let Some(labels) = &self.labels else {
            return Ok(None);
        };
        let mut data = vec![0f32; indices.len() * self.classes];
        for (r, &i) in indices.iter().enumerate() {
            data[r * self.classes + labels[i]] = 1.0;
        }
        Ok(Some(
            Tensor::from_vec(data, (indices.len(), self.classes), device)?.to_dtype(dtype)?,
        ))
    }

    /// Deterministic permutation for one epoch.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: Dataset,
    /// Absent for CelebA, which has no test split.
    pub test: Option<Dataset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestOptions {
    #[serde(default)]
    pub verify_checksums: bool,
    /// Cap on images read, applied to each split.
    #[serde(default)]
    pub limit: Option<usize>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            verify_checksums: true,
            limit: None,
        }
    }
}

fn ingestion(file: &Path, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        file: file.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| ingestion(path, e.to_string()))
}

/// Digests listed in `dir/SHA256SUMS`, keyed by file name.
fn load_checksums(dir: &Path) -> Result<Option<HashMap<String, String>>> {
    let path = dir.join("SHA256SUMS");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| ingestion(&path, e.to_string()))?;
    let mut map = HashMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next()) {
            (Some(hash), Some(name)) => {
                map.insert(name.trim_start_matches('*').to_string(), hash.to_lowercase());
            }
            _ => return Err(ingestion(&path, format!("malformed line {line:?}"))),
        }
    }
    Ok(Some(map))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Reader {
    sums: Option<HashMap<String, String>>,
}

impl Reader {
    fn new(dir: &Path, opts: &IngestOptions) -> Result<Self> {
        let sums = if opts.verify_checksums { load_checksums(dir)? } else { None };
        Ok(Self { sums })
    }

    fn read(&self, path: &Path) -> Result<Vec<u8>> {
        let bytes = read_file(path)?;
        if let Some(sums) = &self.sums {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if let Some(expected) = sums.get(name) {
                let actual = sha256_hex(&bytes);
                if &actual != expected {
                    return Err(ingestion(
                        path,
                        format!("checksum mismatch: expected {expected}, got {actual}"),
                    ));
                }
            }
        }
        Ok(bytes)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Parses an IDX3 image file into `(n, h, w, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    if bytes.len() < 16 || be_u32(bytes, 0) != 0x0803 {
        return Err(ingestion(path, "not an IDX3 unsigned-byte image file"));
    }
    let (n, h, w) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    if bytes.len() != 16 + n * h * w {
        return Err(ingestion(
            path,
            format!("expected {} bytes for {n}×{h}×{w}, found {}", 16 + n * h * w, bytes.len()),
        ));
    }
    Ok((n, h, w, bytes[16..].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    if bytes.len() < 8 || be_u32(bytes, 0) != 0x0801 {
        return Err(ingestion(path, "not an IDX1 unsigned-byte label file"));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() != 8 + n {
        return Err(ingestion(path, format!("expected {n} labels, found {}", bytes.len() - 8)));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

fn limit_dataset(d: Dataset, limit: Option<usize>) -> Dataset {
    match limit {
        Some(n) if n < d.len() => d.take(n),
        _ => d,
    }
}

fn read_idx_split(id: DatasetId, dir: &Path, prefix: &str, reader: &Reader, limit: Option<usize>) -> Result<Dataset> {
    let img_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lab_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let (n, h, w, pixels) = parse_idx_images(&reader.read(&img_path)?, &img_path)?;
    let labels = parse_idx_labels(&reader.read(&lab_path)?, &lab_path)?;
    if labels.len() != n {
        return Err(ingestion(&lab_path, format!("{} labels for {n} images", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= 10) {
        return Err(ingestion(&lab_path, format!("label {bad} out of range")));
    }
    Ok(limit_dataset(Dataset::new(id, (1, h, w), pixels, Some(labels), 10)?, limit))
}

fn read_cifar(dir: &Path, reader: &Reader, opts: &IngestOptions) -> Result<DatasetSplits> {
    let dir = if dir.join("cifar-10-batches-bin").is_dir() {
        dir.join("cifar-10-batches-bin")
    } else {
        dir.to_path_buf()
    };
    let read = |names: &[String]| -> Result<Dataset> {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for name in names {
            let path = dir.join(name);
            let bytes = reader.read(&path)?;
            if bytes.len() % 3073 != 0 {
                return Err(ingestion(&path, "length is not a multiple of 3073-byte records"));
            }
            for rec in bytes.chunks(3073) {
                if rec[0] >= 10 {
                    return Err(ingestion(&path, format!("label {} out of range", rec[0])));
                }
                labels.push(rec[0] as usize);
                pixels.extend_from_slice(&rec[1..]);
            }
        }
        Ok(limit_dataset(
            Dataset::new(DatasetId::Cifar10, (3, 32, 32), pixels, Some(labels), 10)?,
            opts.limit,
        ))
    };
    let train: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    Ok(DatasetSplits {
        train: read(&train)?,
        test: Some(read(&["test_batch.bin".to_string()])?),
    })
}

pub const CELEBA_SIZE: usize = 64;

/// Center square crop resized to 64×64.
fn read_celeba(dir: &Path, reader: &Reader, opts: &IngestOptions) -> Result<DatasetSplits> {
    let img_dir = if dir.join("img_align_celeba").is_dir() {
        dir.join("img_align_celeba")
    } else {
        dir.to_path_buf()
    };
    let mut files: Vec<PathBuf> = fs::read_dir(&img_dir)
        .map_err(|e| ingestion(&img_dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("jpg")))
        .collect();
    files.sort();
    if let Some(n) = opts.limit {
        files.truncate(n);
    }
    if files.is_empty() {
        return Err(ingestion(&img_dir, "no .jpg images found"));
    }
    let mut pixels = Vec::with_capacity(files.len() * 3 * CELEBA_SIZE * CELEBA_SIZE);
    for path in &files {
        let bytes = reader.read(path)?;
        let img = image::load_from_memory(&bytes).map_err(|e| ingestion(path, e.to_string()))?;
        let side = img.width().min(img.height());
        let crop = img.crop_imm((img.width() - side) / 2, (img.height() - side) / 2, side, side);
        let rgb = crop
            .resize_exact(CELEBA_SIZE as u32, CELEBA_SIZE as u32, image::imageops::FilterType::Triangle)
            .to_rgb8();
        for ch in 0..3 {
            pixels.extend(rgb.pixels().map(|p| p.0[ch]));
        }
    }
    Ok(DatasetSplits {
        train: Dataset::new(DatasetId::Celeba, (3, CELEBA_SIZE, CELEBA_SIZE), pixels, None, 0)?,
        test: None,
    })
}

/// Loads a dataset from `root/<id>/`. The synthetic dataset needs no files.
pub fn ingest_dataset(id: DatasetId, root: &Path, opts: &IngestOptions) -> Result<DatasetSplits> {
    if id == DatasetId::SyntheticFactors {
        let full = SyntheticFactors::default().dataset();
        return Ok(DatasetSplits {
            train: limit_dataset(full.clone(), opts.limit),
            test: Some(full),
        });
    }
    let dir = root.join(id.dir_name());
    if !dir.is_dir() {
        return Err(ingestion(
            &dir,
            "dataset directory missing; see docs/DATA.md for the fetch step",
        ));
    }
    let reader = Reader::new(&dir, opts)?;
    match id {
        DatasetId::Mnist | DatasetId::FashionMnist => Ok(DatasetSplits {
            train: read_idx_split(id, &dir, "train", &reader, opts.limit)?,
            test: Some(read_idx_split(id, &dir, "t10k", &reader, opts.limit)?),
        }),
        DatasetId::Cifar10 => read_cifar(&dir, &reader, opts),
        DatasetId::Celeba => read_celeba(&dir, &reader, opts),
        DatasetId::SyntheticFactors => unreachable!(),
    }
}

/// Two discrete factors, glyph shape and position on a 3×3 grid, rendered
/// to 16×16 binary images. Every factor combination is a distinct image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticFactors {
    pub size: usize,
}

impl Default for SyntheticFactors {
    fn default() -> Self {
        Self { size: 16 }
    }
}

const GLYPHS: [[&str; 5]; 3] = [
    ["#####", "#####", "#####", "#####", "#####"],
    ["..#..", "..#..", "#####", "..#..", "..#.."],
    ["#####", "#...#", "#...#", "#...#", "#####"],
];

impl SyntheticFactors {
    pub const SHAPES: usize = 3;
    pub const POSITIONS: usize = 9;

    pub fn factor_sizes(&self) -> Vec<usize> {
        vec![Self::SHAPES, Self::POSITIONS]
    }

    pub fn render(&self, shape: usize, position: usize) -> Vec<u8> {
        let s = self.size;
        let mut img = vec![0u8; s * s];
        let cell = s / 3;
        let (row, col) = (position / 3, position % 3);
        let (oy, ox) = (row * cell + (cell - 5) / 2, col * cell + (cell - 5) / 2);
        for (y, line) in GLYPHS[shape].iter().enumerate() {
            for (x, ch) in line.bytes().enumerate() {
                if ch == b'#' {
                    img[(oy + y) * s + ox + x] = 255;
                }
            }
        }
        img
    }

    /// All 27 images with the shape as class label.
    pub fn dataset(&self) -> Dataset {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for shape in 0..Self::SHAPES {
            for pos in 0..Self::POSITIONS {
                pixels.extend(self.render(shape, pos));
                labels.push(shape);
            }
        }
        Dataset::new(
            DatasetId::SyntheticFactors,
            (1, self.size, self.size),
            pixels,
            Some(labels),
            Self::SHAPES,
        )
        .expect("synthetic dataset is well formed")
    }

    pub fn random_factors(&self, rng: &mut impl Rng) -> Vec<usize> {
        vec![rng.random_range(0..Self::SHAPES), rng.random_range(0..Self::POSITIONS)]
    }
}
