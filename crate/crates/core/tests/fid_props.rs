mod common;

use cagn_core::data::{synth, Family};
use cagn_core::metrics::*;
use cagn_core::Tensor;
use common::oracles::diagonal_fid;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_psd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
    &a * a.transpose()
}

fn diag_stats(mu: &[f64], var: &[f64]) -> FidStats {
    FidStats {
        mu: DVector::from_column_slice(mu),
        sigma: DMatrix::from_diagonal(&DVector::from_column_slice(var)),
        count: 0,
    }
}

#[test]
fn sqrt_residual_over_random_psd_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for i in 0..100 {
        let d = 2 + i % 12;
        let s = random_psd(&mut rng, d);
        let r = matrix_sqrt_psd(&s).unwrap();
        let resid = (&r * &r - &s).amax() / s.amax().max(1.0);
        assert!(resid < 1e-8, "matrix {} residual {:.3e}", i, resid);
        assert!((&r - r.transpose()).amax() < 1e-12);
    }
}

#[test]
fn sqrt_rejects_asymmetric_input() {
    let mut m = DMatrix::<f64>::identity(3, 3);
    m[(0, 2)] = 0.5;
    assert!(matrix_sqrt_psd(&m).is_err());
}

#[test]
fn diagonal_gaussians_match_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    for _ in 0..20 {
        let d = rng.gen_range(1..10);
        let mu1: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mu2: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let v1: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..3.0)).collect();
        let v2: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..3.0)).collect();
        let got = fid(&diag_stats(&mu1, &v1), &diag_stats(&mu2, &v2)).unwrap();
        assert!((got - diagonal_fid(&mu1, &v1, &mu2, &v2)).abs() < 1e-4);
    }
}

#[test]
fn identical_and_swapped_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let fa = DMatrix::from_fn(200, 16, |_, _| rng.gen_range(-1.0..1.0));
    let fb = DMatrix::from_fn(200, 16, |_, _| rng.gen_range(-0.5..1.5));
    let (a, b) = (FidStats::from_features(&fa).unwrap(), FidStats::from_features(&fb).unwrap());
    assert!(fid(&a, &a).unwrap() < 1e-6);
    let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
    assert!((ab - ba).abs() < 1e-6 * ab.max(1.0));
    assert!(FidStats::from_features(&DMatrix::zeros(16, 16)).is_err());
}

#[test]
fn image_fid_is_zero_on_itself_and_needs_enough_samples() {
    let ex = FeatureExtractor::new(1234, 3);
    let d = synth(Family::Blobs, 1, 80, 16).unwrap();
    assert!(proxy_fid(&ex, &d.images, &d.images).unwrap() < 1e-6);
    let few = d.images.slice_rows(0, ex.dim()).unwrap();
    assert!(proxy_fid(&ex, &few, &d.images).is_err());
}

#[test]
fn distinct_families_dwarf_split_half_noise() {
    let ex = FeatureExtractor::new(1234, 3);
    let blobs = synth(Family::Blobs, 1, 256, 16).unwrap().images;
    let stripes = synth(Family::Stripes, 2, 128, 16).unwrap().images;
    let (h0, h1) = (blobs.slice_rows(0, 128).unwrap(), blobs.slice_rows(128, 128).unwrap());
    let within = proxy_fid(&ex, &h0, &h1).unwrap();
    let across = proxy_fid(&ex, &h0, &stripes).unwrap();
    assert!(across >= 10.0 * within, "across {} within {}", across, within);
}

#[test]
fn fid_grows_with_noise_mix() {
    let ex = FeatureExtractor::new(1234, 3);
    let real = synth(Family::Rings, 3, 256, 16).unwrap().images;
    let (a, b) = (real.slice_rows(0, 128).unwrap(), real.slice_rows(128, 128).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(54);
    let noise = Tensor::<f32>::from_fn(b.shape(), |_| rng.gen_range(-1.0..1.0));
    let scores: Vec<f64> = [0.0f32, 0.25, 0.5, 0.75, 1.0]
        .iter()
        .map(|&alpha| {
            let mixed = b.zip_map(&noise, |x, n| (1.0 - alpha) * x + alpha * n).unwrap();
            proxy_fid(&ex, &a, &mixed).unwrap()
        })
        .collect();
    assert!(scores.windows(2).all(|w| w[1] > w[0]), "{:?}", scores);
}

#[test]
fn embedding_is_deterministic_per_seed() {
    let imgs = synth(Family::Checkers, 4, 8, 16).unwrap().images;
    let a = FeatureExtractor::new(9, 3).embed(&imgs).unwrap();
    let b = FeatureExtractor::new(9, 3).embed(&imgs).unwrap();
    let c = FeatureExtractor::new(10, 3).embed(&imgs).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.shape(), (8, FEATURE_DIM));
}

#[test]
fn stability_scan_windows_and_divergence() {
    let log: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 1.0)).collect();
    let r = stability_scan(&log, 5, 100.0).unwrap();
    assert_eq!(r.loss_d.window_mean, vec![2.0, 7.0]);
    assert_eq!(r.loss_d.window_var, vec![2.0, 2.0]);
    assert_eq!(r.loss_g.mean_var(), 0.0);
    assert!(!r.diverged);
    let mut bad = log.clone();
    bad[3].1 = f64::NAN;
    assert!(stability_scan(&bad, 5, 100.0).unwrap().diverged);
    assert!(stability_scan(&log, 5, 8.0).unwrap().diverged);
    assert!(stability_scan(&log, 11, 1.0).is_err());
    assert!(stability_scan(&[], 1, 1.0).is_err());
}
