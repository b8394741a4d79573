//! Noise and conditional-code sampling.
//!
//! A generator input is the concatenation `z ⊕ c`: `z` is nuisance noise and
//! `c` is the structured code the similarity constraint ties to image
//! similarity. Codes are either one-hot class indicators or bounded scalars.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDistribution {
    /// Uniform on (-1, 1).
    Uniform,
    StandardNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub dim: usize,
    pub distribution: NoiseDistribution,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            dim: 62,
            distribution: NoiseDistribution::Uniform,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeKind {
    Discrete,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeSpec {
    pub kind: CodeKind,
    /// Number of classes (discrete) or number of scalar slots (continuous).
    pub cardinality: usize,
    /// Closed interval for continuous slots.
    #[serde(default = "default_range")]
    pub range: (f64, f64),
    /// Draw discrete classes as a balanced, shuffled sequence instead of i.i.d.
    #[serde(default)]
    pub stratified: bool,
}

fn default_range() -> (f64, f64) {
    (-1.0, 1.0)
}

impl Default for CodeSpec {
    fn default() -> Self {
        Self::discrete(10)
    }
}

impl CodeSpec {
    pub fn discrete(classes: usize) -> Self {
        Self {
            kind: CodeKind::Discrete,
            cardinality: classes,
            range: default_range(),
            stratified: false,
        }
    }

    pub fn continuous(slots: usize) -> Self {
        Self {
            kind: CodeKind::Continuous,
            cardinality: slots,
            range: default_range(),
            stratified: false,
        }
    }

    /// Width of one code vector.
    pub fn dim(&self) -> usize {
        self.cardinality
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            CodeKind::Discrete if self.cardinality < 2 => {
                invalid("discrete code needs at least 2 classes")
            }
            CodeKind::Continuous if self.cardinality < 1 => {
                invalid("continuous code needs at least 1 slot")
            }
            CodeKind::Continuous if !(self.range.0 < self.range.1) => invalid(format!(
                "continuous code range {:?} is empty",
                self.range
            )),
            _ => Ok(()),
        }
    }

    pub fn one_hot(&self, class: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.cardinality];
        v[class] = 1.0;
        v
    }
}

/// Row-major noise and code matrices for one generator batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub batch: usize,
    pub noise_dim: usize,
    pub z: Vec<f64>,
    pub c: Vec<f64>,
    pub spec: CodeSpec,
}

impl LatentBatch {
    pub fn from_parts(z: Vec<f64>, c: Vec<f64>, noise_dim: usize, spec: CodeSpec) -> Result<Self> {
        let code_dim = spec.dim();
        if noise_dim == 0 || code_dim == 0 {
            return invalid("latent dimensions must be positive");
        }
        if z.len() % noise_dim != 0 || c.len() % code_dim != 0 {
            return invalid("latent buffers are not whole rows");
        }
        let batch = z.len() / noise_dim;
        if c.len() / code_dim != batch {
            return invalid(format!(
                "noise has {batch} rows but codes have {}",
                c.len() / code_dim
            ));
        }
        Ok(Self {
            batch,
            noise_dim,
            z,
            c,
            spec,
        })
    }

    pub fn code_dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn code(&self, i: usize) -> &[f64] {
        let d = self.code_dim();
        &self.c[i * d..(i + 1) * d]
    }

    pub fn noise(&self, i: usize) -> &[f64] {
        &self.z[i * self.noise_dim..(i + 1) * self.noise_dim]
    }

    /// Class index of each row; `None` for continuous codes.
    pub fn classes(&self) -> Option<Vec<usize>> {
        if self.spec.kind != CodeKind::Discrete {
            return None;
        }
        Some(
            (0..self.batch)
                .map(|i| {
                    self.code(i)
                        .iter()
                        .position(|&v| v == 1.0)
                        .unwrap_or(0)
                })
                .collect(),
        )
    }

    /// Generator input `[batch, noise_dim + code_dim]`.
    pub fn generator_input(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let width = self.noise_dim + self.code_dim();
        let mut rows = Vec::with_capacity(self.batch * width);
        for i in 0..self.batch {
            rows.extend_from_slice(self.noise(i));
            rows.extend_from_slice(self.code(i));
        }
        Ok(Tensor::from_vec(rows, (self.batch, width), device)?.to_dtype(dtype)?)
    }

    pub fn code_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.c.clone(), (self.batch, self.code_dim()), device)?
            .to_dtype(dtype)?)
    }
}

pub fn sample_noise(spec: &NoiseSpec, batch: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..batch * spec.dim)
        .map(|_| match spec.distribution {
            NoiseDistribution::Uniform => rng.random_range(-1.0..1.0),
            NoiseDistribution::StandardNormal => rng.sample(StandardNormal),
        })
        .collect()
}

pub fn sample_codes(spec: &CodeSpec, batch: usize, rng: &mut impl Rng) -> Vec<f64> {
    let k = spec.cardinality;
    match spec.kind {
        CodeKind::Discrete => {
            let classes: Vec<usize> = if spec.stratified {
                let mut v: Vec<usize> = (0..batch).map(|i| i % k).collect();
                v.shuffle(rng);
                v
            } else {
                (0..batch).map(|_| rng.random_range(0..k)).collect()
            };
            classes.into_iter().flat_map(|cls| spec.one_hot(cls)).collect()
        }
        CodeKind::Continuous => {
            let (lo, hi) = spec.range;
            (0..batch * k).map(|_| rng.random_range(lo..=hi)).collect()
        }
    }
}

/// Draws a reproducible latent batch from `seed`.
pub fn sample_latent(
    noise: &NoiseSpec,
    code: &CodeSpec,
    batch: usize,
    seed: u64,
) -> Result<LatentBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_latent_with(noise, code, batch, &mut rng)
}

pub fn sample_latent_with(
    noise: &NoiseSpec,
    code: &CodeSpec,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<LatentBatch> {
    if batch == 0 {
        return invalid("batch must be positive");
    }
    if noise.dim == 0 {
        return invalid("noise dim must be positive");
    }
    code.validate()?;
    let z = sample_noise(noise, batch, rng);
    let c = sample_codes(code, batch, rng);
    LatentBatch::from_parts(z, c, noise.dim, code.clone())
}

/// Agreement weight between two codes, in `[0, 1]`.
///
/// Discrete codes return the inner product, so one-hots agree with weight 1
/// on the same class and 0 otherwise. Continuous codes return
/// `1 - min(1, mean|c_i - c_j| / (hi - lo))`.
pub fn code_agreement(ci: &[f64], cj: &[f64], spec: &CodeSpec) -> Result<f64> {
    if ci.len() != cj.len() || ci.len() != spec.dim() {
        return invalid(format!(
            "code dimension mismatch: {} vs {} (spec {})",
            ci.len(),
            cj.len(),
            spec.dim()
        ));
    }
    Ok(match spec.kind {
        CodeKind::Discrete => ci.iter().zip(cj).map(|(a, b)| a * b).sum(),
        CodeKind::Continuous => {
            let width = spec.range.1 - spec.range.0;
            let mean_gap =
                ci.iter().zip(cj).map(|(a, b)| (a - b).abs()).sum::<f64>() / ci.len() as f64;
            1.0 - (mean_gap / width).min(1.0)
        }
    })
}

/// Agreement for each `(i, j)` pair of a batch.
pub fn pair_agreements(codes: &LatentBatch, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|&(i, j)| {
            if i >= codes.batch || j >= codes.batch {
                return invalid(format!("pair ({i}, {j}) out of range for batch {}", codes.batch));
            }
            code_agreement(codes.code(i), codes.code(j), &codes.spec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discrete_batch_is_one_hot() {
        let b = sample_latent(&NoiseSpec::default(), &CodeSpec::discrete(10), 32, 7).unwrap();
        assert_eq!(b.batch, 32);
        assert_eq!(b.z.len(), 32 * 62);
        for i in 0..32 {
            let row = b.code(i);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert!(row.iter().all(|&v| v == 0.0 || v == 1.0));
        }
        assert!(b.z.iter().all(|v| (-1.0..1.0).contains(v)));
    }

    #[test]
    fn continuous_codes_respect_range() {
        let noise = NoiseSpec {
            dim: 2,
            distribution: NoiseDistribution::Uniform,
        };
        let b = sample_latent(&noise, &CodeSpec::continuous(1), 4, 0).unwrap();
        assert_eq!(b.c.len(), 4);
        assert!(b.c.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn same_seed_same_batch() {
        let noise = NoiseSpec {
            dim: 5,
            distribution: NoiseDistribution::StandardNormal,
        };
        let a = sample_latent(&noise, &CodeSpec::discrete(10), 16, 99).unwrap();
        let b = sample_latent(&noise, &CodeSpec::discrete(10), 16, 99).unwrap();
        assert_eq!(a, b);
        let c = sample_latent(&noise, &CodeSpec::discrete(10), 16, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_arguments() {
        let noise = NoiseSpec::default();
        assert!(sample_latent(&noise, &CodeSpec::discrete(10), 0, 0).is_err());
        let zero = NoiseSpec { dim: 0, ..noise.clone() };
        assert!(sample_latent(&zero, &CodeSpec::discrete(10), 4, 0).is_err());
        assert!(sample_latent(&noise, &CodeSpec::discrete(1), 4, 0).is_err());
    }

    #[test]
    fn stratified_classes_are_balanced() {
        let spec = CodeSpec {
            stratified: true,
            ..CodeSpec::discrete(4)
        };
        let b = sample_latent(&NoiseSpec::default(), &spec, 32, 3).unwrap();
        let mut counts = [0usize; 4];
        for cls in b.classes().unwrap() {
            counts[cls] += 1;
        }
        assert_eq!(counts, [8; 4]);
    }

    #[test]
    fn discrete_agreement_examples() {
        let spec = CodeSpec::discrete(10);
        let three = spec.one_hot(3);
        let seven = spec.one_hot(7);
        assert_eq!(code_agreement(&three, &three, &spec).unwrap(), 1.0);
        assert_eq!(code_agreement(&three, &seven, &spec).unwrap(), 0.0);
        assert!(code_agreement(&three, &[1.0], &spec).is_err());
    }

    #[test]
    fn continuous_agreement_identity_and_decay() {
        let spec = CodeSpec::continuous(1);
        assert_eq!(code_agreement(&[0.5], &[0.5], &spec).unwrap(), 1.0);
        let mut last = 1.0;
        for step in 1..=10 {
            let w = code_agreement(&[0.0], &[step as f64 * 0.1], &spec).unwrap();
            assert!(w < last);
            last = w;
        }
        assert_eq!(code_agreement(&[-1.0], &[1.0], &spec).unwrap(), 0.0);
    }

    #[test]
    fn same_class_fraction_converges_to_one_over_k() {
        let spec = CodeSpec::discrete(10);
        let noise = NoiseSpec { dim: 1, ..NoiseSpec::default() };
        let mut same = 0u64;
        let mut total = 0u64;
        for seed in 0..10_000u64 {
            let b = sample_latent(&noise, &spec, 32, seed).unwrap();
            let cls = b.classes().unwrap();
            for i in 0..32 {
                for j in i + 1..32 {
                    same += (cls[i] == cls[j]) as u64;
                    total += 1;
                }
            }
        }
        let frac = same as f64 / total as f64;
        assert!((frac - 0.1).abs() < 0.02, "same-class fraction {frac}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn discrete_agreement_symmetric_and_idempotent(a in 0usize..10, b in 0usize..10) {
                let spec = CodeSpec::discrete(10);
                let (x, y) = (spec.one_hot(a), spec.one_hot(b));
                prop_assert_eq!(code_agreement(&x, &y, &spec).unwrap(), code_agreement(&y, &x, &spec).unwrap());
                prop_assert_eq!(code_agreement(&x, &x, &spec).unwrap(), 1.0);
            }

            #[test]
            fn continuous_agreement_is_one_iff_equal(a in -1.0f64..=1.0, b in -1.0f64..=1.0) {
                let spec = CodeSpec::continuous(1);
                let w = code_agreement(&[a], &[b], &spec).unwrap();
                prop_assert!((0.0..=1.0).contains(&w));
                prop_assert_eq!(w == 1.0, a == b);
            }
        }
    }
}
