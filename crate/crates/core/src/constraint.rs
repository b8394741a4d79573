//! Similarity constraints over a batch of generated images.
//!
//! Every variant is a weighted sum over image pairs: a "same" term that pulls
//! pairs with agreeing codes together and a "different" term that pushes
//! pairs with disagreeing codes apart. Which term function plays which role
//! depends on the orientation of the measure: Euclidean distance is small for
//! similar images, SSIM is large.
//!
//! The original constraint averages over all ordered pairs of the batch with
//! `1 / (N (N - 1))`. The modified constraint evaluates SSIM on the cross
//! pairs of two disjoint random subsets of sizes `n1` and `n2`, normalizes by
//! `1 / (n1 n2)` and weights the two terms with `lambda1` (different codes)
//! and `lambda2` (same codes).

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::latent::{pair_agreements, CodeKind, LatentBatch};
use crate::ssim::{ssim_pairs, ImageBatch, SsimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScVariant {
    Original,
    Modified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMeasure {
    Euclidean,
    Ssim,
}

impl SimMeasure {
    /// True when larger values mean more similar images.
    pub fn is_similarity(self) -> bool {
        matches!(self, SimMeasure::Ssim)
    }
}

/// The increasing/decreasing term pair applied to a pair's measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermFamily {
    /// `(m, 1 / m)`
    Linear,
    /// `(m², 1 / m²)`
    Square,
    /// `(e^m, e^-m)`
    Exp,
}

impl TermFamily {
    pub fn increasing(self, m: f64) -> f64 {
        match self {
            TermFamily::Linear => m,
            TermFamily::Square => m * m,
            TermFamily::Exp => m.exp(),
        }
    }

    pub fn decreasing(self, m: f64, eps: f64) -> f64 {
        match self {
            TermFamily::Linear => 1.0 / (m + eps),
            TermFamily::Square => 1.0 / (m * m + eps),
            TermFamily::Exp => (-m).exp(),
        }
    }

    fn increasing_t(self, m: &Tensor) -> Result<Tensor> {
        Ok(match self {
            TermFamily::Linear => m.clone(),
            TermFamily::Square => m.sqr()?,
            TermFamily::Exp => m.exp()?,
        })
    }

    fn decreasing_t(self, m: &Tensor, eps: f64) -> Result<Tensor> {
        Ok(match self {
            TermFamily::Linear => m.affine(1.0, eps)?.recip()?,
            TermFamily::Square => m.sqr()?.affine(1.0, eps)?.recip()?,
            TermFamily::Exp => m.neg()?.exp()?,
        })
    }
}

/// How the modified constraint draws its pairs from the two subsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairScheme {
    /// Every `(i, j)` with `i` in the first subset and `j` in the second.
    Cross,
    /// Cross pairs restricted to `j > i`.
    CrossAscending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScConfig {
    pub variant: ScVariant,
    pub code_kind: CodeKind,
    pub sim_measure: SimMeasure,
    pub term_family: TermFamily,
    /// Weight of the original constraint inside the objective.
    pub lambda: f64,
    /// Weight of the different-code term of the modified constraint.
    pub lambda1: f64,
    /// Weight of the same-code term of the modified constraint.
    pub lambda2: f64,
    pub n1: usize,
    pub n2: usize,
    pub epsilon: f64,
    /// Weight both modified terms by the code agreement.
    pub eq7_verbatim: bool,
    pub pair_scheme: PairScheme,
    pub ssim: SsimConfig,
}

impl Default for ScConfig {
    fn default() -> Self {
        Self::modified()
    }
}

impl ScConfig {
    pub fn original() -> Self {
        Self {
            variant: ScVariant::Original,
            code_kind: CodeKind::Discrete,
            sim_measure: SimMeasure::Euclidean,
            term_family: TermFamily::Linear,
            lambda: 1.0,
            lambda1: std::f64::consts::E,
            lambda2: 1.5f64.exp(),
            n1: 10,
            n2: 18,
            epsilon: 1e-8,
            eq7_verbatim: false,
            pair_scheme: PairScheme::Cross,
            ssim: SsimConfig::default(),
        }
    }

    pub fn modified() -> Self {
        Self {
            variant: ScVariant::Modified,
            sim_measure: SimMeasure::Ssim,
            term_family: TermFamily::Exp,
            ..Self::original()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 > 0.0 && self.lambda2 > 0.0 && self.epsilon > 0.0) {
            return Err(Error::Config("lambda1, lambda2 and epsilon must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.variant == ScVariant::Modified {
            if self.sim_measure != SimMeasure::Ssim {
                return Err(Error::Config(
                    "the modified constraint requires the ssim measure".into(),
                ));
            }
            if self.n1 == 0 || self.n2 == 0 {
                return Err(Error::Config("n1 and n2 must be positive".into()));
            }
        }
        if self.sim_measure == SimMeasure::Ssim {
            self.ssim.validate()?;
        }
        Ok(())
    }

    fn check_codes(&self, codes: &LatentBatch) -> Result<()> {
        if codes.spec.kind != self.code_kind {
            return Err(Error::Config(format!(
                "constraint configured for {:?} codes but batch has {:?} codes",
                self.code_kind, codes.spec.kind
            )));
        }
        Ok(())
    }
}

/// Pairwise measure values for a set of requested pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub measure: SimMeasure,
    values: BTreeMap<(usize, usize), f64>,
}

impl SimilarityMatrix {
    pub fn new(measure: SimMeasure) -> Self {
        Self {
            measure,
            values: BTreeMap::new(),
        }
    }

    /// Stores `value` for `(i, j)`. Storing the reverse order with a
    /// different value breaks symmetry and is rejected.
    pub fn insert(&mut self, i: usize, j: usize, value: f64) -> Result<()> {
        if i == j {
            return invalid(format!("self pair ({i}, {i})"));
        }
        match self.measure {
            SimMeasure::Euclidean if value < 0.0 => {
                return invalid(format!("negative distance {value} for ({i}, {j})"))
            }
            SimMeasure::Ssim if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&value) => {
                return invalid(format!("ssim {value} outside [-1, 1] for ({i}, {j})"))
            }
            _ => {}
        }
        if let Some(&other) = self.values.get(&(j, i)) {
            if (other - value).abs() > 1e-6 {
                return invalid(format!(
                    "asymmetric entries for ({i}, {j}): {value} vs {other}"
                ));
            }
        }
        self.values.insert((i, j), value);
        Ok(())
    }

    /// Value of `(i, j)`, falling back to `(j, i)`.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values
            .get(&(i, j))
            .or_else(|| self.values.get(&(j, i)))
            .copied()
    }

    /// The pairs that were stored, in sorted order.
    pub fn mask(&self) -> Vec<(usize, usize)> {
        self.values.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Same/different pair accounting for one constraint evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionStats {
    /// Agreement mass (exact count for discrete codes).
    pub same_pairs: f64,
    pub diff_pairs: f64,
    /// `diff / same`; absent when either side is empty.
    pub ratio: Option<f64>,
    pub pair_evaluations: usize,
    pub same_term_mean: Option<f64>,
    pub diff_term_mean: Option<f64>,
}

/// Counts same-code and different-code pairs.
pub fn contribution_stats(codes: &LatentBatch, pairs: &[(usize, usize)]) -> Result<ContributionStats> {
    let a = pair_agreements(codes, pairs)?;
    Ok(stats_from_agreements(&a))
}

fn stats_from_agreements(a: &[f64]) -> ContributionStats {
    let same: f64 = a.iter().sum();
    let diff: f64 = a.iter().map(|w| 1.0 - w).sum();
    ContributionStats {
        same_pairs: same,
        diff_pairs: diff,
        ratio: (same > 0.0 && diff > 0.0).then(|| diff / same),
        pair_evaluations: a.len(),
        same_term_mean: None,
        diff_term_mean: None,
    }
}

/// All unordered pairs `i < j` of a batch.
pub fn all_pairs(batch: usize) -> Vec<(usize, usize)> {
    (0..batch)
        .flat_map(|i| (i + 1..batch).map(move |j| (i, j)))
        .collect()
}

/// Draws disjoint subsets of sizes `n1` and `n2` and returns their cross pairs.
pub fn subsample_pairs(batch: usize, n1: usize, n2: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    subsample_pairs_with(batch, n1, n2, PairScheme::Cross, seed)
}

pub fn subsample_pairs_with(
    batch: usize,
    n1: usize,
    n2: usize,
    scheme: PairScheme,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    if n1 == 0 || n2 == 0 {
        return invalid("subset sizes must be positive");
    }
    if n1 + n2 > batch {
        return invalid(format!("n1 + n2 = {} exceeds batch {batch}", n1 + n2));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..batch).collect();
    idx.shuffle(&mut rng);
    let (first, rest) = idx.split_at(n1);
    let second = &rest[..n2];
    Ok(first
        .iter()
        .flat_map(|&i| second.iter().map(move |&j| (i, j)))
        .filter(|&(i, j)| scheme == PairScheme::Cross || j > i)
        .collect())
}

/// Euclidean distance between two flattened images.
pub fn euclidean_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return invalid(format!("shape mismatch: {} vs {} pixels", a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

fn index_tensor(idx: impl Iterator<Item = usize>, images: &ImageBatch) -> Result<Tensor> {
    let v: Vec<u32> = idx.map(|i| i as u32).collect();
    Ok(Tensor::new(v.as_slice(), images.pixels.device())?)
}

/// Pixel-space L2 distance for each pair, `[pairs]`.
pub fn euclidean_pairs(images: &ImageBatch, pairs: &[(usize, usize)]) -> Result<Tensor> {
    let n = images.len();
    if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= n || j >= n) {
        return invalid(format!("pair ({i}, {j}) out of range for batch of {n}"));
    }
    let flat = images.pixels.flatten_from(1)?;
    let li = index_tensor(pairs.iter().map(|p| p.0), images)?;
    let ri = index_tensor(pairs.iter().map(|p| p.1), images)?;
    let diff = (flat.index_select(&li, 0)? - flat.index_select(&ri, 0)?)?;
    Ok(diff.sqr()?.sum(1)?.sqrt()?)
}

/// Differentiable measure values for each pair.
pub fn pair_measure(
    images: &ImageBatch,
    pairs: &[(usize, usize)],
    measure: SimMeasure,
    ssim: &SsimConfig,
) -> Result<Tensor> {
    match measure {
        SimMeasure::Euclidean => euclidean_pairs(images, pairs),
        SimMeasure::Ssim => ssim_pairs(images, pairs, ssim),
    }
}

pub fn similarity_matrix(
    images: &ImageBatch,
    pairs: &[(usize, usize)],
    measure: SimMeasure,
    ssim: &SsimConfig,
) -> Result<SimilarityMatrix> {
    let values: Vec<f64> = pair_measure(images, pairs, measure, ssim)?
        .to_dtype(DType::F64)?
        .to_vec1()?;
    let mut m = SimilarityMatrix::new(measure);
    for (&(i, j), v) in pairs.iter().zip(values) {
        m.insert(i, j, v)?;
    }
    Ok(m)
}

/// Result of a differentiable constraint evaluation.
#[derive(Debug, Clone)]
pub struct ScOutput {
    /// Scalar tensor connected to the image graph.
    pub value: Tensor,
    pub stats: ContributionStats,
}

impl ScOutput {
    pub fn scalar(&self) -> Result<f64> {
        Ok(self.value.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

/// Per-pair weights `(same, diff)` and the term functions they multiply.
struct PairWeights {
    same: Vec<f64>,
    diff: Vec<f64>,
}

fn weights_for(cfg: &ScConfig, agreements: &[f64]) -> PairWeights {
    match cfg.variant {
        ScVariant::Original => PairWeights {
            same: agreements.to_vec(),
            diff: agreements.iter().map(|a| 1.0 - a).collect(),
        },
        ScVariant::Modified => PairWeights {
            same: agreements.iter().map(|a| cfg.lambda2 * a).collect(),
            diff: agreements
                .iter()
                .map(|a| cfg.lambda1 * if cfg.eq7_verbatim { *a } else { 1.0 - a })
                .collect(),
        },
    }
}

/// `(same_term, diff_term)` for a single measure value.
fn pair_terms(cfg: &ScConfig, m: f64) -> (f64, f64) {
    let inc = cfg.term_family.increasing(m);
    let dec = cfg.term_family.decreasing(m, cfg.epsilon);
    if cfg.sim_measure.is_similarity() {
        (dec, inc)
    } else {
        (inc, dec)
    }
}

fn pair_terms_t(cfg: &ScConfig, m: &Tensor) -> Result<(Tensor, Tensor)> {
    let inc = cfg.term_family.increasing_t(m)?;
    let dec = cfg.term_family.decreasing_t(m, cfg.epsilon)?;
    Ok(if cfg.sim_measure.is_similarity() {
        (dec, inc)
    } else {
        (inc, dec)
    })
}

fn weighted_sum(
    cfg: &ScConfig,
    measure: &Tensor,
    agreements: &[f64],
    scale: f64,
) -> Result<ScOutput> {
    let w = weights_for(cfg, agreements);
    let (dtype, device) = (measure.dtype(), measure.device());
    let p = agreements.len();
    let same_w = Tensor::from_vec(w.same.clone(), p, device)?.to_dtype(dtype)?;
    let diff_w = Tensor::from_vec(w.diff.clone(), p, device)?.to_dtype(dtype)?;
    let (same_t, diff_t) = pair_terms_t(cfg, measure)?;
    let same_part = (same_t * same_w)?;
    let diff_part = (diff_t * diff_w)?;
    let value = ((same_part.sum_all()? + diff_part.sum_all()?)? * scale)?;

    let mut stats = stats_from_agreements(agreements);
    let same_sum: f64 = same_part.detach().to_dtype(DType::F64)?.sum_all()?.to_scalar()?;
    let diff_sum: f64 = diff_part.detach().to_dtype(DType::F64)?.sum_all()?.to_scalar()?;
    stats.same_term_mean = (stats.same_pairs > 0.0).then(|| same_sum / stats.same_pairs);
    stats.diff_term_mean = (stats.diff_pairs > 0.0).then(|| diff_sum / stats.diff_pairs);
    Ok(ScOutput { value, stats })
}

/// Original constraint over all ordered pairs `j != i` of the batch.
///
/// Each unordered pair is measured once and counted twice, which matches the
/// double sum exactly because both the measure and the agreement are symmetric.
pub fn sc_original(images: &ImageBatch, codes: &LatentBatch, cfg: &ScConfig) -> Result<ScOutput> {
    if cfg.variant != ScVariant::Original {
        return Err(Error::Config("sc_original called with a modified config".into()));
    }
    cfg.validate()?;
    cfg.check_codes(codes)?;
    let n = images.len();
    if n < 2 {
        return invalid(format!("constraint needs at least 2 images, got {n}"));
    }
    if codes.batch != n {
        return invalid(format!("{n} images but {} codes", codes.batch));
    }
    let pairs = all_pairs(n);
    let agreements = pair_agreements(codes, &pairs)?;
    let measure = pair_measure(images, &pairs, cfg.sim_measure, &cfg.ssim)?;
    let mut out = weighted_sum(cfg, &measure, &agreements, 2.0 / (n * (n - 1)) as f64)?;
    out.stats.pair_evaluations = pairs.len();
    Ok(out)
}

/// Modified constraint over an explicit pair list.
pub fn sc_modified(
    images: &ImageBatch,
    codes: &LatentBatch,
    pairs: &[(usize, usize)],
    cfg: &ScConfig,
) -> Result<ScOutput> {
    if cfg.variant != ScVariant::Modified {
        return Err(Error::Config("sc_modified called with an original config".into()));
    }
    cfg.validate()?;
    cfg.check_codes(codes)?;
    if pairs.is_empty() {
        return invalid("modified constraint needs at least one pair");
    }
    if codes.batch != images.len() {
        return invalid(format!("{} images but {} codes", images.len(), codes.batch));
    }
    if let Some(&(i, _)) = pairs.iter().find(|&&(i, j)| i == j) {
        return invalid(format!("self pair ({i}, {i})"));
    }
    let agreements = pair_agreements(codes, pairs)?;
    let measure = pair_measure(images, pairs, SimMeasure::Ssim, &cfg.ssim)?;
    weighted_sum(cfg, &measure, &agreements, 1.0 / (cfg.n1 * cfg.n2) as f64)
}

/// Original constraint evaluated from precomputed measure values.
pub fn sc_original_from_matrix(
    sim: &SimilarityMatrix,
    codes: &LatentBatch,
    cfg: &ScConfig,
) -> Result<f64> {
    check_matrix_measure(sim, cfg)?;
    let n = codes.batch;
    if n < 2 {
        return invalid(format!("constraint needs at least 2 images, got {n}"));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            let m = sim
                .get(i, j)
                .ok_or_else(|| Error::InvalidArgument(format!("missing pair ({i}, {j})")))?;
            let a = crate::latent::code_agreement(codes.code(i), codes.code(j), &codes.spec)?;
            total += pair_value(cfg, a, m);
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

/// Modified constraint evaluated from precomputed measure values.
pub fn sc_modified_from_matrix(
    sim: &SimilarityMatrix,
    codes: &LatentBatch,
    pairs: &[(usize, usize)],
    cfg: &ScConfig,
) -> Result<f64> {
    check_matrix_measure(sim, cfg)?;
    if pairs.is_empty() {
        return invalid("modified constraint needs at least one pair");
    }
    let mut total = 0.0;
    for &(i, j) in pairs {
        let m = sim
            .get(i, j)
            .ok_or_else(|| Error::InvalidArgument(format!("missing pair ({i}, {j})")))?;
        let a = crate::latent::code_agreement(codes.code(i), codes.code(j), &codes.spec)?;
        total += pair_value(cfg, a, m);
    }
    Ok(total / (cfg.n1 * cfg.n2) as f64)
}

fn check_matrix_measure(sim: &SimilarityMatrix, cfg: &ScConfig) -> Result<()> {
    if sim.measure != cfg.sim_measure {
        return Err(Error::Config(format!(
            "matrix holds {:?} values but config uses {:?}",
            sim.measure, cfg.sim_measure
        )));
    }
    if cfg.variant == ScVariant::Modified && cfg.sim_measure != SimMeasure::Ssim {
        return Err(Error::Config(
            "the modified constraint requires the ssim measure".into(),
        ));
    }
    Ok(())
}

fn pair_value(cfg: &ScConfig, agreement: f64, m: f64) -> f64 {
    let w = weights_for(cfg, &[agreement]);
    let (same_t, diff_t) = pair_terms(cfg, m);
    w.same[0] * same_t + w.diff[0] * diff_t
}
