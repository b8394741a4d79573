mod common;

use std::f64::consts::E;

use candle_core::DType;
use proptest::prelude::*;
use scgan_core::constraint::{
    all_pairs, contribution_stats, sc_modified, sc_modified_from_matrix, sc_original, sc_original_from_matrix,
    subsample_pairs, subsample_pairs_with, PairScheme, ScConfig, SimMeasure, SimilarityMatrix, TermFamily,
};
use scgan_core::latent::{code_agreement, sample_latent, CodeSpec, NoiseSpec};
use scgan_core::ssim::{ImageBatch, PixelRange, SsimConfig};

fn hand_matrix(measure: SimMeasure, entries: &[((usize, usize), f64)]) -> SimilarityMatrix {
    let mut m = SimilarityMatrix::new(measure);
    for &((i, j), v) in entries {
        m.insert(i, j, v).unwrap();
    }
    m
}

#[test]
fn original_four_image_hand_case() {
    let cfg = ScConfig::original();
    let sim = hand_matrix(
        SimMeasure::Euclidean,
        &[((0, 1), 1.0), ((0, 2), 2.0), ((0, 3), 3.0), ((1, 2), 4.0), ((1, 3), 5.0), ((2, 3), 6.0)],
    );
    let codes = common::discrete_codes(&[0, 0, 1, 1], 10);
    let eps = cfg.epsilon;
    // same-class pairs (0,1), (2,3) contribute their distance; the rest 1/(d+eps)
    let unordered = 1.0 + 6.0 + 1.0 / (2.0 + eps) + 1.0 / (3.0 + eps) + 1.0 / (4.0 + eps) + 1.0 / (5.0 + eps);
    let expected = 2.0 * unordered / 12.0;
    let v = sc_original_from_matrix(&sim, &codes, &cfg).unwrap();
    assert!((v - expected).abs() < 1e-9, "{v} vs {expected}");
    assert!((v - 497.0 / 360.0).abs() < 1e-8);
}

#[test]
fn original_mixed_hand_case_with_soft_codes() {
    let cfg = ScConfig::original();
    let sim = hand_matrix(SimMeasure::Euclidean, &[((0, 1), 0.5)]);
    let spec = CodeSpec::discrete(2);
    let codes = scgan_core::latent::LatentBatch::from_parts(vec![0.0, 0.0], vec![1.0, 0.0, 0.5, 0.5], 1, spec).unwrap();
    let v = sc_original_from_matrix(&sim, &codes, &cfg).unwrap();
    let expected = 2.0 * (0.5 * 0.5 + 0.5 / (0.5 + cfg.epsilon)) / 2.0;
    assert!((v - expected).abs() < 1e-12);
}

#[test]
fn modified_single_pair_hand_cases() {
    let cfg = ScConfig::modified();
    let norm = (cfg.n1 * cfg.n2) as f64;
    assert!((cfg.lambda1 - E).abs() < 1e-15 && (cfg.lambda2 - E.powf(1.5)).abs() < 1e-12);

    let same = common::discrete_codes(&[4, 4], 10);
    let sim = hand_matrix(SimMeasure::Ssim, &[((0, 1), 1.0)]);
    let v = sc_modified_from_matrix(&sim, &same, &[(0, 1)], &cfg).unwrap();
    assert!((v - cfg.lambda2 * (-1.0f64).exp() / norm).abs() < 1e-9);
    assert!((v * norm - 0.5f64.exp()).abs() < 1e-9);

    let diff = common::discrete_codes(&[4, 7], 10);
    let sim = hand_matrix(SimMeasure::Ssim, &[((0, 1), 0.0)]);
    let v = sc_modified_from_matrix(&sim, &diff, &[(0, 1)], &cfg).unwrap();
    assert!((v - cfg.lambda1 / norm).abs() < 1e-9);
}

#[test]
fn modified_identical_images_through_ssim() {
    let cfg = ScConfig::modified();
    let mut rng = common::rng(8);
    let one = common::uniform(&mut rng, 784);
    let data: Vec<f64> = one.iter().cycle().take(2 * 784).copied().collect();
    let imgs = ImageBatch::from_vec(data, (2, 1, 28, 28), PixelRange::Unit, DType::F64).unwrap();
    let out = sc_modified(&imgs, &common::discrete_codes(&[2, 2], 10), &[(0, 1)], &cfg).unwrap();
    let norm = (cfg.n1 * cfg.n2) as f64;
    assert!((out.scalar().unwrap() - 0.5f64.exp() / norm).abs() < 1e-9);
    assert_eq!(out.stats.same_pairs, 1.0);
}

#[test]
fn verbatim_weighting_flips_different_class_term() {
    let cfg = ScConfig {
        eq7_verbatim: true,
        ..ScConfig::modified()
    };
    let diff = common::discrete_codes(&[4, 7], 10);
    let sim = hand_matrix(SimMeasure::Ssim, &[((0, 1), 0.0)]);
    assert_eq!(sc_modified_from_matrix(&sim, &diff, &[(0, 1)], &cfg).unwrap(), 0.0);
}

fn gradient_check(cfg: &ScConfig, pairs: Option<&[(usize, usize)]>, seed: u64) -> f64 {
    let shape = (4, 1, 8, 8);
    let mut rng = common::rng(seed);
    let x: Vec<f64> = common::uniform(&mut rng, 256).iter().map(|v| 0.1 + 0.8 * v).collect();
    let codes = common::discrete_codes(&[0, 0, 1, 1], 3);
    let eval = |data: &[f64]| -> f64 {
        let imgs = ImageBatch::from_vec(data.to_vec(), shape, PixelRange::Unit, DType::F64).unwrap();
        match pairs {
            Some(p) => sc_modified(&imgs, &codes, p, cfg).unwrap().scalar().unwrap(),
            None => sc_original(&imgs, &codes, cfg).unwrap().scalar().unwrap(),
        }
    };
    let var = common::var_from(&x, shape);
    let imgs = ImageBatch::new(var.as_tensor().clone(), PixelRange::Unit).unwrap();
    let out = match pairs {
        Some(p) => sc_modified(&imgs, &codes, p, cfg).unwrap(),
        None => sc_original(&imgs, &codes, cfg).unwrap(),
    };
    let grads = out.value.backward().unwrap();
    let analytic = common::to_f64(grads.get(var.as_tensor()).unwrap());
    let numeric = common::finite_difference(&x, 1e-6, eval);
    common::relative_error(&analytic, &numeric)
}

#[test]
fn original_gradient_matches_finite_differences() {
    for family in [TermFamily::Linear, TermFamily::Square, TermFamily::Exp] {
        let cfg = ScConfig {
            term_family: family,
            ..ScConfig::original()
        };
        let err = gradient_check(&cfg, None, 21);
        assert!(err < 1e-4, "{family:?}: {err}");
    }
    let ssim_cfg = ScConfig {
        sim_measure: SimMeasure::Ssim,
        term_family: TermFamily::Exp,
        ssim: SsimConfig {
            window_size: 7,
            ..SsimConfig::default()
        },
        ..ScConfig::original()
    };
    assert!(gradient_check(&ssim_cfg, None, 22) < 1e-4);
}

#[test]
fn modified_gradient_matches_finite_differences() {
    let cfg = ScConfig {
        n1: 2,
        n2: 2,
        ssim: SsimConfig {
            window_size: 7,
            ..SsimConfig::default()
        },
        ..ScConfig::modified()
    };
    let pairs = [(0, 1), (0, 2), (3, 1), (3, 2)];
    let err = gradient_check(&cfg, Some(&pairs), 23);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn subsample_same_class_fraction_over_seeds() {
    let noise = NoiseSpec::default();
    let code = CodeSpec::discrete(10);
    let (mut same, mut total) = (0.0, 0.0);
    for seed in 0..10_000u64 {
        let latent = sample_latent(&noise, &code, 32, seed).unwrap();
        let pairs = subsample_pairs(32, 10, 18, seed.wrapping_mul(7919)).unwrap();
        let stats = contribution_stats(&latent, &pairs).unwrap();
        assert_eq!(stats.pair_evaluations, 180);
        same += stats.same_pairs;
        total += stats.same_pairs + stats.diff_pairs;
    }
    let fraction = same / total;
    assert!((fraction - 0.1).abs() < 0.02, "{fraction}");
    assert!((same / 10_000.0 - 18.0).abs() < 0.5);
}

#[test]
fn all_pairs_same_class_expectation() {
    let noise = NoiseSpec::default();
    let code = CodeSpec::discrete(10);
    let mut same = 0.0;
    for seed in 0..2000u64 {
        let latent = sample_latent(&noise, &code, 32, seed).unwrap();
        same += contribution_stats(&latent, &all_pairs(32)).unwrap().same_pairs;
    }
    assert!((same / 2000.0 - 49.6).abs() < 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cross_pairs_have_product_cardinality(n1 in 1usize..12, n2 in 1usize..12, extra in 0usize..6, seed in any::<u64>()) {
        let batch = n1 + n2 + extra;
        let pairs = subsample_pairs(batch, n1, n2, seed).unwrap();
        prop_assert_eq!(pairs.len(), n1 * n2);
        prop_assert!(pairs.iter().all(|&(i, j)| i != j && i < batch && j < batch));
        let asc = subsample_pairs_with(batch, n1, n2, PairScheme::CrossAscending, seed).unwrap();
        prop_assert!(asc.iter().all(|&(i, j)| j > i));
        prop_assert!(asc.len() <= n1 * n2);
    }

    #[test]
    fn agreement_lies_in_unit_interval(a in -1.0f64..=1.0, b in -1.0f64..=1.0, k in 2usize..12, i in 0usize..12, j in 0usize..12) {
        let cont = CodeSpec::continuous(1);
        let w = code_agreement(&[a], &[b], &cont).unwrap();
        prop_assert!((0.0..=1.0).contains(&w));
        prop_assert_eq!(w, code_agreement(&[b], &[a], &cont).unwrap());
        let disc = CodeSpec::discrete(k);
        let w = code_agreement(&disc.one_hot(i % k), &disc.one_hot(j % k), &disc).unwrap();
        prop_assert_eq!(w, if i % k == j % k { 1.0 } else { 0.0 });
    }

    #[test]
    fn contribution_counts_partition_pairs(seed in any::<u64>(), batch in 2usize..40) {
        let latent = sample_latent(&NoiseSpec::default(), &CodeSpec::discrete(10), batch, seed).unwrap();
        let pairs = all_pairs(batch);
        let s = contribution_stats(&latent, &pairs).unwrap();
        prop_assert_eq!(s.same_pairs + s.diff_pairs, pairs.len() as f64);
        prop_assert_eq!(s.pair_evaluations, batch * (batch - 1) / 2);
        prop_assert_eq!(s.ratio.is_some(), s.same_pairs > 0.0 && s.diff_pairs > 0.0);
    }

    #[test]
    fn original_constraint_is_nonnegative(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let imgs = ImageBatch::from_vec(common::uniform(&mut rng, 5 * 64), (5, 1, 8, 8), PixelRange::Unit, DType::F64).unwrap();
        let latent = sample_latent(&NoiseSpec::default(), &CodeSpec::discrete(3), 5, seed).unwrap();
        let v = sc_original(&imgs, &latent, &ScConfig::original()).unwrap().scalar().unwrap();
        prop_assert!(v >= 0.0 && v.is_finite());
    }
}
