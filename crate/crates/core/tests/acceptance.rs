//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Environment:
//! - `SCGAN_FULL_SCALE=1` runs the 25-epoch ordering check (criterion 11).
//! - `SCGAN_ACCEPTANCE_ONLY=1,4,9` restricts the run to the listed criteria.
//! - `SCGAN_ACCEPTANCE_STRICT=1` makes any FAIL exit non-zero.
//! - `SCGAN_DATA_ROOT` locates MNIST as for the CLI.

mod common;

use std::f64::consts::E;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector};
use scgan_core::constraint::{
    all_pairs, contribution_stats, sc_modified, sc_modified_from_matrix, sc_original, sc_original_from_matrix,
    subsample_pairs, ScConfig, SimMeasure, SimilarityMatrix, TermFamily,
};
use scgan_core::data::{ingest_dataset, Dataset, DatasetId, DatasetSplits, IngestOptions, SyntheticFactors};
use scgan_core::latent::{sample_latent, CodeSpec, LatentBatch, NoiseSpec};
use scgan_core::metrics::extractor::{cached_feature_extractor, ExtractorConfig, FeatureExtractor};
use scgan_core::metrics::factor::{
    factorvae_score, synthetic_identity, FactorVaeConfig, GanFactorSource, PosthocEncoder, QHeadRepresentation,
    Representation,
};
use scgan_core::metrics::fid::{fid, fid_from_moments, GaussianMoments};
use scgan_core::metrics::intra_inter_ssim;
use scgan_core::metrics::parzen::{parzen_estimate, ParzenConfig};
use scgan_core::models::{gan_value, ModelBundle, ObjectiveConfig, ObjectiveKind};
use scgan_core::nn::AdamConfig;
use scgan_core::ssim::{ssim_pairs, ImageBatch, PixelRange, SsimConfig};
use scgan_core::train::{measure_step_time, StepRecord, TrainConfig, Trainer};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn within_budget(start: Instant, seconds: f64) -> Result<f64, String> {
    let t = start.elapsed().as_secs_f64();
    ensure(t < seconds, format!("took {t:.1}s, budget {seconds}s"))?;
    Ok(t)
}

fn c1_ssim() -> Check {
    let start = Instant::now();
    let cfg = SsimConfig::default();
    let mut rng = common::rng(100);
    let n = 100;
    let data = common::uniform(&mut rng, 2 * n * 784);
    let batch = ImageBatch::from_vec(data.clone(), (2 * n, 1, 28, 28), PixelRange::Unit, DType::F64).map_err(fail)?;
    let pairs: Vec<(usize, usize)> = (0..n).map(|i| (2 * i, 2 * i + 1)).collect();
    let swapped: Vec<(usize, usize)> = pairs.iter().map(|&(i, j)| (j, i)).collect();
    let selves: Vec<(usize, usize)> = (0..2 * n).map(|i| (i, i)).collect();
    let fwd = common::to_f64(&ssim_pairs(&batch, &pairs, &cfg).map_err(fail)?);
    let bwd = common::to_f64(&ssim_pairs(&batch, &swapped, &cfg).map_err(fail)?);
    let own = common::to_f64(&ssim_pairs(&batch, &selves, &cfg).map_err(fail)?);
    let (mut sym, mut oracle_err) = (0.0f64, 0.0f64);
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let oracle = common::ssim_loop(&data[i * 784..(i + 1) * 784], &data[j * 784..(j + 1) * 784], 28, 28, &cfg);
        oracle_err = oracle_err.max((fwd[k] - oracle).abs());
        sym = sym.max((fwd[k] - bwd[k]).abs());
        ensure((-1.0..=1.0).contains(&fwd[k]), format!("ssim {} out of range", fwd[k]))?;
    }
    ensure(sym <= 1e-7, format!("asymmetry {sym:e}"))?;
    ensure(oracle_err < 1e-6, format!("oracle error {oracle_err:e}"))?;
    let worst_self = own.iter().cloned().fold(f64::INFINITY, f64::min);
    ensure(own.iter().all(|&s| s >= 1.0 - 1e-6 && s <= 1.0), format!("self-ssim {worst_self}"))?;
    let t = within_budget(start, 60.0)?;
    Ok(format!("oracle err {oracle_err:.1e}, asymmetry {sym:.1e}, min self {worst_self:.9}, {t:.1}s"))
}

fn sc_gradient_error(cfg: &ScConfig, pairs: Option<&[(usize, usize)]>, seed: u64) -> Result<f64, String> {
    let shape = (4, 1, 8, 8);
    let mut rng = common::rng(seed);
    let x: Vec<f64> = common::uniform(&mut rng, 256).iter().map(|v| 0.1 + 0.8 * v).collect();
    let codes = common::discrete_codes(&[0, 0, 1, 1], 3);
    let value = |imgs: &ImageBatch| match pairs {
        Some(p) => sc_modified(imgs, &codes, p, cfg),
        None => sc_original(imgs, &codes, cfg),
    };
    let var = common::var_from(&x, shape);
    let imgs = ImageBatch::new(var.as_tensor().clone(), PixelRange::Unit).map_err(fail)?;
    let grads = value(&imgs).map_err(fail)?.value.backward().map_err(fail)?;
    let analytic = common::to_f64(grads.get(var.as_tensor()).ok_or("no gradient")?);
    let numeric = common::finite_difference(&x, 1e-6, |d| {
        let imgs = ImageBatch::from_vec(d.to_vec(), shape, PixelRange::Unit, DType::F64).unwrap();
        value(&imgs).unwrap().scalar().unwrap()
    });
    Ok(common::relative_error(&analytic, &numeric))
}

fn c2_gradients() -> Check {
    let start = Instant::now();
    let window = SsimConfig {
        window_size: 7,
        ..SsimConfig::default()
    };
    let original = sc_gradient_error(&ScConfig::original(), None, 21)?;
    let original_ssim = sc_gradient_error(
        &ScConfig {
            sim_measure: SimMeasure::Ssim,
            term_family: TermFamily::Exp,
            ssim: window.clone(),
            ..ScConfig::original()
        },
        None,
        22,
    )?;
    let modified_cfg = ScConfig {
        n1: 2,
        n2: 2,
        ssim: window,
        ..ScConfig::modified()
    };
    let modified = sc_gradient_error(&modified_cfg, Some(&[(0, 1), (0, 2), (3, 1), (3, 2)]), 23)?;
    let worst = original.max(original_ssim).max(modified);
    ensure(worst < 1e-4, format!("relative error {worst:e}"))?;
    let t = within_budget(start, 120.0)?;
    Ok(format!(
        "original {original:.1e}, original/ssim {original_ssim:.1e}, modified {modified:.1e}, {t:.1}s"
    ))
}

fn hand_matrix(measure: SimMeasure, entries: &[((usize, usize), f64)]) -> Result<SimilarityMatrix, String> {
    let mut m = SimilarityMatrix::new(measure);
    for &((i, j), v) in entries {
        m.insert(i, j, v).map_err(fail)?;
    }
    Ok(m)
}

fn c3_hand_oracle() -> Check {
    let cfg = ScConfig::original();
    let eps = cfg.epsilon;
    let sim = hand_matrix(
        SimMeasure::Euclidean,
        &[((0, 1), 1.0), ((0, 2), 2.0), ((0, 3), 3.0), ((1, 2), 4.0), ((1, 3), 5.0), ((2, 3), 6.0)],
    )?;
    let codes = common::discrete_codes(&[0, 0, 1, 1], 10);
    let expected = 2.0 * (1.0 + 6.0 + 1.0 / (2.0 + eps) + 1.0 / (3.0 + eps) + 1.0 / (4.0 + eps) + 1.0 / (5.0 + eps)) / 12.0;
    let original = sc_original_from_matrix(&sim, &codes, &cfg).map_err(fail)?;
    ensure((original - expected).abs() < 1e-9, format!("four-image case {original} vs {expected}"))?;

    let cfg = ScConfig::modified();
    let norm = (cfg.n1 * cfg.n2) as f64;
    let same = sc_modified_from_matrix(
        &hand_matrix(SimMeasure::Ssim, &[((0, 1), 1.0)])?,
        &common::discrete_codes(&[4, 4], 10),
        &[(0, 1)],
        &cfg,
    )
    .map_err(fail)?;
    let diff = sc_modified_from_matrix(
        &hand_matrix(SimMeasure::Ssim, &[((0, 1), 0.0)])?,
        &common::discrete_codes(&[4, 7], 10),
        &[(0, 1)],
        &cfg,
    )
    .map_err(fail)?;
    let same_expected = E.powf(1.5) * (-1.0f64).exp() / norm;
    let diff_expected = E / norm;
    ensure((same - same_expected).abs() < 1e-9, format!("same-class pair {same} vs {same_expected}"))?;
    ensure((diff - diff_expected).abs() < 1e-9, format!("cross-class pair {diff} vs {diff_expected}"))?;
    Ok(format!(
        "four-image {original:.12}, same pair ×N1N2 {:.10}, cross pair ×N1N2 {:.10}",
        same * norm,
        diff * norm
    ))
}

fn c4_pairs() -> Check {
    let n = subsample_pairs(32, 10, 18, 0).map_err(fail)?.len();
    ensure(n == 180, format!("{n} subsampled pairs"))?;
    let all = all_pairs(32).len();
    ensure(all == 496, format!("{all} pairs over the full batch"))?;
    let (noise, code) = (NoiseSpec::default(), CodeSpec::discrete(10));
    let (mut same, mut total) = (0.0, 0.0);
    for seed in 0..10_000u64 {
        let latent = sample_latent(&noise, &code, 32, seed).map_err(fail)?;
        let pairs = subsample_pairs(32, 10, 18, seed.wrapping_mul(7919)).map_err(fail)?;
        let stats = contribution_stats(&latent, &pairs).map_err(fail)?;
        ensure(stats.pair_evaluations == 180, "pair evaluation count drifted")?;
        same += stats.same_pairs;
        total += stats.same_pairs + stats.diff_pairs;
    }
    let fraction = same / total;
    ensure((fraction - 0.1).abs() <= 0.02, format!("same-class fraction {fraction}"))?;
    Ok(format!(
        "180 subsampled, 496 all-pairs, same:diff = {fraction:.4}:{:.4} over 10^4 seeds",
        1.0 - fraction
    ))
}

fn moments(mean: &[f64], diag: &[f64]) -> Result<GaussianMoments, String> {
    GaussianMoments::new(DVector::from_row_slice(mean), DMatrix::from_diagonal(&DVector::from_row_slice(diag)))
        .map_err(fail)
}

fn c5_fid() -> Check {
    let start = Instant::now();
    let one = fid_from_moments(&moments(&[0.0], &[1.0])?, &moments(&[1.0], &[1.0])?).map_err(fail)?;
    ensure((one - 1.0).abs() < 1e-9, format!("1-D case {one}"))?;
    let two = fid_from_moments(&moments(&[0.0, 0.0], &[1.0, 1.0])?, &moments(&[1.0, 0.0], &[4.0, 4.0])?)
        .map_err(fail)?;
    ensure((two - 3.0).abs() < 1e-6, format!("2-D case {two}"))?;
    let mut rng = common::rng(31);
    let rows = |rng: &mut rand_chacha::ChaCha8Rng, n: usize, shift: f64| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..6).map(|_| rand::Rng::sample::<f64, _>(rng, rand_distr::StandardNormal) + shift).collect())
            .collect()
    };
    let a = rows(&mut rng, 300, 0.0);
    let b = rows(&mut rng, 250, 0.4);
    let same = fid(&a, &a).map_err(fail)?;
    ensure(same.abs() < 1e-6, format!("fid(A, A) = {same:e}"))?;
    let (ab, ba) = (fid(&a, &b).map_err(fail)?, fid(&b, &a).map_err(fail)?);
    ensure((ab - ba).abs() < 1e-8, format!("asymmetry {:e}", (ab - ba).abs()))?;
    let t = within_budget(start, 60.0)?;
    Ok(format!("1-D {one}, 2-D {two:.9}, fid(A,A) {same:.1e}, asymmetry {:.1e}, {t:.2}s", (ab - ba).abs()))
}

fn c6_parzen() -> Check {
    let generated = vec![vec![0.1, 0.2], vec![0.5, -0.3], vec![1.0, 0.9]];
    let test = vec![vec![0.0, 0.0], vec![0.7, 0.4]];
    let mut worst = 0.0f64;
    for sigma in [0.3, 1.0, 2.5] {
        let cfg = ParzenConfig {
            sigmas: vec![sigma],
            ..ParzenConfig::default()
        };
        let r = parzen_estimate(&generated, &test, &cfg).map_err(fail)?;
        worst = worst.max((r.mean - common::parzen_loop(&generated, &test, sigma)).abs());
    }
    ensure(worst < 1e-8, format!("oracle error {worst:e}"))?;
    let g = vec![vec![0.25; 7]];
    let cfg = ParzenConfig {
        sigmas: vec![1.0],
        ..ParzenConfig::default()
    };
    let r = parzen_estimate(&g, &g, &cfg).map_err(fail)?;
    let exact = -(7.0 / 2.0) * (2.0 * std::f64::consts::PI).ln();
    ensure(r.mean == exact, format!("zero-distance case {} vs {exact}", r.mean))?;
    Ok(format!("oracle error {worst:.1e}, zero-distance {} exact", r.mean))
}

fn c7_factorvae() -> Check {
    let start = Instant::now();
    let source = SyntheticFactors::default();
    let mut repr = synthetic_identity(source.clone());
    let mut src = source;
    let identity = factorvae_score(&mut src, &mut repr, &FactorVaeConfig::default(), 0).map_err(fail)?;
    ensure(identity.score == 1.0, format!("identity scored {}", identity.score))?;
    let scores: Vec<f64> = (0..20).map(common::mixing_score).collect();
    let mean = scores.iter().sum::<f64>() / 20.0;
    ensure((mean - 0.5).abs() <= 0.1, format!("mixing mean {mean}"))?;
    let t = within_budget(start, 300.0)?;
    Ok(format!("identity {:?}, mixing mean {mean:.3} over 20 seeds, {t:.1}s", identity.score))
}

fn c8_reductions() -> Check {
    let v = gan_value(&[0.5], &[0.5]).map_err(fail)?;
    ensure((v + 2.0 * 2f64.ln()).abs() < 1e-9, format!("gan_value(0.5, 0.5) = {v}"))?;
    let arch = common::tiny_arch(CodeSpec::discrete(3));
    let mut scgan_obj = ObjectiveConfig::new(ObjectiveKind::Scgan);
    scgan_obj.sc.as_mut().ok_or("scgan without constraint")?.lambda = 0.0;
    let scgan = ModelBundle::new(arch.clone(), scgan_obj, AdamConfig::default(), AdamConfig::default(), 5, DType::F64)
        .map_err(fail)?;
    let cgan = ModelBundle::new(
        arch,
        ObjectiveConfig::new(ObjectiveKind::Cgan),
        AdamConfig::default(),
        AdamConfig::default(),
        5,
        DType::F64,
    )
    .map_err(fail)?;
    common::transplant(&scgan, &cgan);
    let z = sample_latent(&scgan.arch.noise_spec(), &scgan.arch.code, 6, 9).map_err(fail)?;
    let mut rng = common::rng(10);
    let pixels: Vec<f64> = common::uniform(&mut rng, 6 * 64).iter().map(|v| 2.0 * v - 1.0).collect();
    let real = Tensor::from_vec(pixels, (6, 1, 8, 8), &Device::Cpu).map_err(fail)?;
    let codes = z.code_tensor(&Device::Cpu, DType::F64).map_err(fail)?;
    let a = scgan.total_objective(&real, Some(&codes), &z, 0).map_err(fail)?;
    let b = cgan.total_objective(&real, Some(&codes), &z, 0).map_err(fail)?;
    let dg = (common::scalar(&a.g_loss) - common::scalar(&b.g_loss)).abs();
    let dd = (common::scalar(&a.d_loss) - common::scalar(&b.d_loss)).abs();
    ensure(dg < 1e-7 && dd < 1e-7, format!("scgan(λ=0) − cgan: g {dg:e}, d {dd:e}"))?;
    Ok(format!("gan_value(0.5,0.5) = {v:.12}, |Δg| {dg:.1e}, |Δd| {dd:.1e}"))
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn load_config(name: &str) -> Result<TrainConfig, String> {
    let text = std::fs::read_to_string(config_path(name)).map_err(|e| format!("{name}: {e}"))?;
    let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| format!("{name}: {e}"))?;
    Ok(cfg.resolved())
}

fn mnist() -> Result<DatasetSplits, String> {
    let root = scgan_core::data::default_data_root();
    ingest_dataset(DatasetId::Mnist, &root, &IngestOptions::default())
        .map_err(|e| format!("MNIST unavailable under {}: {e}", root.display()))
}

fn training_data(cfg: &TrainConfig, splits: &DatasetSplits) -> Dataset {
    match cfg.dataset.subset {
        Some(n) => splits.train.take(n),
        None => splits.train.clone(),
    }
}

fn extractor(splits: &DatasetSplits) -> Result<FeatureExtractor, String> {
    let cache = Path::new(env!("CARGO_TARGET_TMPDIR")).join("extractors");
    cached_feature_extractor(splits, &ExtractorConfig::default(), &cache).map_err(fail)
}

fn samples(bundle: &ModelBundle, n: usize, seed: u64) -> Result<(ImageBatch, LatentBatch), String> {
    let latent = sample_latent(&bundle.arch.noise_spec(), &bundle.arch.code, n, seed).map_err(fail)?;
    Ok((bundle.sample(&latent).map_err(fail)?, latent))
}

fn sample_fid(bundle: &ModelBundle, ex: &FeatureExtractor, test_features: &[Vec<f64>], n: usize) -> Result<f64, String> {
    let mut features = Vec::with_capacity(n);
    for (k, start) in (0..n).step_by(500).enumerate() {
        let (imgs, _) = samples(bundle, 500.min(n - start), 1000 + k as u64)?;
        features.extend(ex.features(&imgs).map_err(fail)?);
    }
    fid(test_features, &features).map_err(fail)
}

fn test_features(splits: &DatasetSplits, ex: &FeatureExtractor, n: usize) -> Result<Vec<Vec<f64>>, String> {
    let test = splits.test.as_ref().ok_or("no test split")?;
    let idx: Vec<usize> = (0..n.min(test.len())).collect();
    ex.features(&test.image_batch(&idx, DType::F32).map_err(fail)?).map_err(fail)
}

/// Shared by criteria 9 and 12: the first smoke run's log.
struct SmokeRun {
    records: Vec<StepRecord>,
}

fn c9_smoke(store: &mut Option<SmokeRun>) -> Check {
    let cfg = load_config("smoke_modified_mnist.json")?;
    ensure(cfg.objective.kind == ObjectiveKind::Modified, "smoke config is not the modified objective")?;
    let splits = mnist()?;
    let data = training_data(&cfg, &splits);
    ensure(data.len() == 2000 && cfg.run.epochs == 3 && cfg.run.seed == 0, "smoke config drifted")?;
    let loading = Instant::now();
    let ex = extractor(&splits)?;
    let extractor_secs = loading.elapsed().as_secs_f64();
    let start = Instant::now();
    let fid_n = 2000;
    let reference = test_features(&splits, &ex, fid_n)?;
    let mut trainer = Trainer::new(cfg.clone(), data).map_err(fail)?;
    let fid_init = sample_fid(&trainer.bundle, &ex, &reference, fid_n)?;
    trainer.run(|_, _| Ok(())).map_err(fail)?;
    let records = trainer.records.clone();
    *store = Some(SmokeRun {
        records: records.clone(),
    });
    let finite = records
        .iter()
        .all(|r| r.d_loss.is_finite() && r.g_loss.is_finite() && r.sc.is_none_or(f64::is_finite));
    ensure(finite, "non-finite loss in the log")?;
    let fid_end = sample_fid(&trainer.bundle, &ex, &reference, fid_n)?;
    let (imgs, latent) = samples(&trainer.bundle, 300, 77)?;
    let classes = latent.classes().ok_or("smoke run has no discrete code")?;
    let (intra, inter) = intra_inter_ssim(&imgs, &classes, &SsimConfig::default()).map_err(fail)?;
    let drop = 1.0 - fid_end / fid_init;
    let t = start.elapsed().as_secs_f64();
    let detail = format!(
        "FID {fid_init:.2} -> {fid_end:.2} ({:.1}% drop), intra SSIM {intra:.4} vs inter {inter:.4}, {} steps, {t:.0}s (+{extractor_secs:.0}s extractor)",
        100.0 * drop,
        records.len()
    );
    ensure(drop >= 0.3, format!("FID drop below 30%: {detail}"))?;
    ensure(intra > inter, format!("intra-class SSIM not above inter-class: {detail}"))?;
    ensure(t < 1200.0, format!("over the 20 min budget: {detail}"))?;
    Ok(detail)
}

fn c10_timing() -> Check {
    let splits = mnist()?;
    let mut modified = load_config("modified_mnist.json")?;
    let mut scgan = load_config("scgan_mnist.json")?;
    for cfg in [&mut modified, &mut scgan] {
        cfg.dataset.subset = Some(640);
    }
    let data = training_data(&modified, &splits);
    let mut pair_counts = Vec::new();
    for cfg in [&modified, &scgan] {
        let mut t = Trainer::new(cfg.clone(), data.clone()).map_err(fail)?;
        pair_counts.push(t.step().map_err(fail)?.sc_pair_evaluations);
    }
    ensure(
        pair_counts == [180, 496],
        format!("pair evaluations modified {} / scgan {}", pair_counts[0], pair_counts[1]),
    )?;
    let (mut tm, mut ts) = (Vec::new(), Vec::new());
    for round in 0..4 {
        let first_modified = round % 2 == 0;
        for k in 0..2 {
            if (k == 0) == first_modified {
                tm.push(measure_step_time(&modified, &data, 2, 10).map_err(fail)?);
            } else {
                ts.push(measure_step_time(&scgan, &data, 2, 10).map_err(fail)?);
            }
        }
    }
    let mean = |v: &[scgan_core::train::StepTiming], f: fn(&scgan_core::train::StepTiming) -> f64| {
        v.iter().map(f).sum::<f64>() / v.len() as f64
    };
    let (m, s) = (mean(&tm, |t| t.total), mean(&ts, |t| t.total));
    let (msc, ssc) = (mean(&tm, |t| t.sc), mean(&ts, |t| t.sc));
    let detail = format!(
        "step {m:.3}s vs {s:.3}s (SC part {msc:.3}s vs {ssc:.3}s), pair evaluations 180 vs 496"
    );
    ensure(m <= s, format!("modified slower than scgan: {detail}"))?;
    Ok(detail)
}

fn gan_factor_score(bundle: &ModelBundle) -> Result<f64, String> {
    let mut source = GanFactorSource::new(bundle, 2, 5).map_err(fail)?;
    let cfg = FactorVaeConfig::default();
    let r = if bundle.discriminator.has_q() {
        let mut repr = QHeadRepresentation(bundle);
        factorvae_score(&mut source, &mut repr, &cfg, 0)
    } else {
        let mut enc = PosthocEncoder::train(&source, &Default::default(), 0).map_err(fail)?;
        let repr: &mut dyn Representation = &mut enc;
        factorvae_score(&mut source, repr, &cfg, 0)
    };
    Ok(r.map_err(fail)?.score)
}

fn c11_full_scale() -> Check {
    if std::env::var("SCGAN_FULL_SCALE").as_deref() != Ok("1") {
        return Err("not run (set SCGAN_FULL_SCALE=1; 25-epoch runs take hours)".into());
    }
    let splits = mnist()?;
    let ex = extractor(&splits)?;
    let reference = test_features(&splits, &ex, 10_000)?;
    let mut results = Vec::new();
    for name in ["modified", "scgan", "infogan", "cgan"] {
        let cfg = load_config(&format!("{name}_mnist.json"))?;
        let data = training_data(&cfg, &splits);
        let mut trainer = Trainer::new(cfg, data).map_err(fail)?;
        trainer.run(|_, _| Ok(())).map_err(fail)?;
        let f = sample_fid(&trainer.bundle, &ex, &reference, 10_000)?;
        let s = gan_factor_score(&trainer.bundle)?;
        results.push((name, f, s));
    }
    let detail = results
        .iter()
        .map(|(n, f, s)| format!("{n}: FID {f:.2}, FactorVAE {s:.3}"))
        .collect::<Vec<_>>()
        .join("; ");
    let fid_ordered = results.windows(2).all(|w| w[0].1 < w[1].1);
    let best_factor = results.iter().skip(1).all(|r| results[0].2 > r.2);
    ensure(fid_ordered, format!("FID ordering differs: {detail}"))?;
    ensure(best_factor, format!("modified not highest FactorVAE: {detail}"))?;
    Ok(detail)
}

fn c12_reproducibility(store: &mut Option<SmokeRun>) -> Check {
    let cfg = load_config("smoke_modified_mnist.json")?;
    let splits = mnist()?;
    let data = training_data(&cfg, &splits);
    let first = match store.take() {
        Some(run) => run.records,
        None => {
            let mut t = Trainer::new(cfg.clone(), data.clone()).map_err(fail)?;
            t.run(|_, _| Ok(())).map_err(fail)?;
            t.records
        }
    };
    let dir = tempfile::tempdir().map_err(fail)?;
    let mut second = Trainer::new(cfg.clone(), data.clone()).map_err(fail)?;
    let total = second.total_steps();
    let split = total - 10;
    for _ in 0..split {
        second.step().map_err(fail)?;
    }
    let ckpt = second.save_checkpoint(Some(&dir.path().join("resume.safetensors"))).map_err(fail)?;
    for _ in split..total {
        second.step().map_err(fail)?;
    }
    let losses = |r: &[StepRecord]| r.iter().map(StepRecord::losses).collect::<Vec<_>>();
    ensure(first.len() == second.records.len(), "runs differ in length")?;
    let mismatch = losses(&first).iter().zip(losses(&second.records)).position(|(a, b)| *a != b);
    ensure(mismatch.is_none(), format!("identical-seed logs diverge at step {mismatch:?}"))?;
    let mut resumed = Trainer::from_checkpoint(cfg, data, &ckpt).map_err(fail)?;
    for _ in 0..10 {
        resumed.step().map_err(fail)?;
    }
    ensure(
        losses(&second.records[split as usize..]) == losses(&resumed.records),
        "resumed steps differ from the uninterrupted run",
    )?;
    Ok(format!("{} logged steps identical; 10 steps after resume at step {split} identical", first.len()))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("SCGAN_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let strict = std::env::var("SCGAN_ACCEPTANCE_STRICT").as_deref() == Ok("1");
    let mut smoke = None;
    let mut passed = 0;
    let mut ran = 0;
    for id in 1..=12usize {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| match id {
            1 => c1_ssim(),
            2 => c2_gradients(),
            3 => c3_hand_oracle(),
            4 => c4_pairs(),
            5 => c5_fid(),
            6 => c6_parzen(),
            7 => c7_factorvae(),
            8 => c8_reductions(),
            9 => c9_smoke(&mut smoke),
            10 => c10_timing(),
            11 => c11_full_scale(),
            _ => c12_reproducibility(&mut smoke),
        }))
        .unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        ran += 1;
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => {
                passed += 1;
                println!("criterion {id:>2}: PASS ({detail}) [{secs:.1}s]");
            }
            Err(why) => println!("criterion {id:>2}: FAIL ({why}) [{secs:.1}s]"),
        }
    }
    println!("acceptance: {passed}/{ran} passed");
    if strict && passed < ran {
        std::process::exit(1);
    }
}
