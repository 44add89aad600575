//! Proxy-FID and loss stability statistics.
//!
//! Features come from a fixed random-weight conv net rather than Inception,
//! so values are only comparable with each other ("proxy-FID").

use crate::error::{contract, Result};
use crate::tensor::{conv2d_forward, ConvConfig, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Default feature width.
pub const FEATURE_DIM: usize = 64;
/// Ridge added to both covariances before any square root.
pub const RIDGE: f64 = 1e-6;

/// Frozen random conv net mapping images to `dim` features by global
/// average pooling of the last layer.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    layers: Vec<(Tensor<f64>, Tensor<f64>, ConvConfig)>,
    pub seed: u64,
}

impl FeatureExtractor {
    pub fn new(seed: u64, in_channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [in_channels, 16, 32, FEATURE_DIM];
        let mut layers = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            let (cin, cout) = (w[0], w[1]);
            let fan_in = (cin * 9) as f64;
            let n = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid sigma");
            let weight = Tensor::from_fn(&[cout, cin, 3, 3], |_| n.sample(&mut rng));
            let bias = Tensor::from_fn(&[cout], |_| 0.1 * n.sample(&mut rng));
            let stride = if i == 0 { 1 } else { 2 };
            layers.push((weight, bias, ConvConfig { stride, padding: 1, groups: 1 }));
        }
        FeatureExtractor { layers, seed }
    }

    pub fn dim(&self) -> usize {
        FEATURE_DIM
    }

    /// Features `[N, d]`, one row per image.
    pub fn embed(&self, images: &Tensor<f32>) -> Result<DMatrix<f64>> {
        let s = images.shape();
        if s.len() != 4 || s[0] == 0 {
            return Err(contract(format!("feature_embed needs a non-empty [N, C, H, W] batch, got {:?}", s)));
        }
        let n = s[0];
        let mut out = DMatrix::zeros(n, FEATURE_DIM);
        // Fixed chunking keeps memory flat; rows are independent.
        for start in (0..n).step_by(64) {
            let len = 64.min(n - start);
            let mut h: Tensor<f64> = images.slice_rows(start, len)?.cast();
            for (w, b, cfg) in &self.layers {
                h = conv2d_forward(&h, w, cfg)?;
                let (c, inner) = (h.shape()[1], h.shape()[2] * h.shape()[3]);
                for (i, v) in h.data_mut().iter_mut().enumerate() {
                    let x = *v + b.data()[(i / inner) % c];
                    *v = if x > 0.0 { x } else { 0.2 * x };
                }
            }
            let (c, inner) = (h.shape()[1], h.shape()[2] * h.shape()[3]);
            for r in 0..len {
                for k in 0..c {
                    let off = (r * c + k) * inner;
                    out[(start + r, k)] = h.data()[off..off + inner].iter().sum::<f64>() / inner as f64;
                }
            }
        }
        Ok(out)
    }
}

/// Gaussian fit of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FidStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub count: usize,
}

impl FidStats {
    /// Mean and unbiased covariance; needs at least `d + 1` rows.
    pub fn from_features(f: &DMatrix<f64>) -> Result<FidStats> {
        let (n, d) = f.shape();
        if n < d + 1 {
            return Err(contract(format!("{} samples for {} features, need at least {}", n, d, d + 1)));
        }
        let mu = f.row_mean().transpose();
        let mut centered = f.clone();
        for mut row in centered.row_iter_mut() {
            row -= mu.transpose();
        }
        let mut sigma = centered.transpose() * &centered / (n as f64 - 1.0);
        sigma = (&sigma + sigma.transpose()) * 0.5;
        Ok(FidStats { mu, sigma, count: n })
    }

    pub fn from_images(ex: &FeatureExtractor, images: &Tensor<f32>) -> Result<FidStats> {
        FidStats::from_features(&ex.embed(images)?)
    }
}

fn check_symmetric(s: &DMatrix<f64>) -> Result<()> {
    if !s.is_square() {
        return Err(contract(format!("matrix {:?} is not square", s.shape())));
    }
    let scale = s.amax().max(1.0);
    let asym = (s - s.transpose()).amax();
    if asym > 1e-9 * scale {
        return Err(contract(format!("matrix not symmetric (max asymmetry {:.3e})", asym)));
    }
    Ok(())
}

/// Symmetric PSD square root by eigendecomposition, clamping negative
/// eigenvalues to zero.
pub fn matrix_sqrt_psd(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(s)?;
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let r = v * DMatrix::from_diagonal(&roots) * v.transpose();
    Ok((&r + r.transpose()) * 0.5)
}

fn trace_sqrt_psd(s: &DMatrix<f64>) -> f64 {
    let sym = (s + s.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum()
}

/// `|mu_a - mu_b|^2 + Tr(S_a) + Tr(S_b) - 2 Tr(sqrt(S_a^1/2 S_b S_a^1/2))`,
/// with a small ridge on both covariances; clamped at 0.
pub fn fid(a: &FidStats, b: &FidStats) -> Result<f64> {
    let d = a.mu.len();
    if b.mu.len() != d || a.sigma.shape() != (d, d) || b.sigma.shape() != (d, d) {
        return Err(contract(format!("feature dimensions {} and {} differ", d, b.mu.len())));
    }
    let ridge = DMatrix::<f64>::identity(d, d) * RIDGE;
    let sa = &a.sigma + &ridge;
    let sb = &b.sigma + &ridge;
    let root_a = matrix_sqrt_psd(&sa)?;
    let m = &root_a * &sb * &root_a;
    let mean_term = (&a.mu - &b.mu).norm_squared();
    let v = mean_term + sa.trace() + sb.trace() - 2.0 * trace_sqrt_psd(&m);
    Ok(v.max(0.0))
}

/// Proxy-FID between two image sets.
pub fn proxy_fid(ex: &FeatureExtractor, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    fid(&FidStats::from_images(ex, a)?, &FidStats::from_images(ex, b)?)
}

/// Windowed statistics of one loss series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesStats {
    pub window_mean: Vec<f64>,
    pub window_var: Vec<f64>,
}

impl SeriesStats {
    /// Mean of the per-window variances.
    pub fn mean_var(&self) -> f64 {
        if self.window_var.is_empty() {
            0.0
        } else {
            self.window_var.iter().sum::<f64>() / self.window_var.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub loss_d: SeriesStats,
    pub loss_g: SeriesStats,
    pub diverged: bool,
    pub iterations: usize,
}

fn windows(xs: &[f64], window: usize) -> SeriesStats {
    let mut window_mean = Vec::new();
    let mut window_var = Vec::new();
    for w in xs.chunks_exact(window) {
        let m = w.iter().sum::<f64>() / window as f64;
        let v = w.iter().map(|x| (x - m).powi(2)).sum::<f64>() / window as f64;
        window_mean.push(m);
        window_var.push(v.max(0.0));
    }
    SeriesStats { window_mean, window_var }
}

/// Non-overlapping windows of `(loss_D, loss_G)`; divergence means any
/// non-finite value or any magnitude above `threshold`.
pub fn stability_scan(log: &[(f64, f64)], window: usize, threshold: f64) -> Result<StabilityReport> {
    if log.is_empty() {
        return Err(contract("stability scan of an empty loss log"));
    }
    if window == 0 || window > log.len() {
        return Err(contract(format!("window {} for a log of {}", window, log.len())));
    }
    let diverged = log
        .iter()
        .any(|&(d, g)| !d.is_finite() || !g.is_finite() || d.abs() > threshold || g.abs() > threshold);
    let d: Vec<f64> = log.iter().map(|p| p.0).collect();
    let g: Vec<f64> = log.iter().map(|p| p.1).collect();
    Ok(StabilityReport { loss_d: windows(&d, window), loss_g: windows(&g, window), diverged, iterations: log.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mu: &[f64], var: &[f64]) -> FidStats {
        FidStats {
            mu: DVector::from_column_slice(mu),
            sigma: DMatrix::from_diagonal(&DVector::from_column_slice(var)),
            count: 0,
        }
    }

    #[test]
    fn diagonal_sqrt() {
        let s = DMatrix::from_diagonal(&DVector::from_column_slice(&[4.0, 9.0]));
        let r = matrix_sqrt_psd(&s).unwrap();
        assert!((r[(0, 0)] - 2.0).abs() < 1e-12 && (r[(1, 1)] - 3.0).abs() < 1e-12);
        assert!(r[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn mean_shift_only() {
        let a = stats(&[0.0, 0.0, 0.0], &[1.0; 3]);
        let b = stats(&[1.0, 0.0, 0.0], &[1.0; 3]);
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-9);
        assert!(fid(&a, &a).unwrap() < 1e-9);
    }

    #[test]
    fn rejects_asymmetric() {
        let mut s = DMatrix::<f64>::identity(2, 2);
        s[(0, 1)] = 0.5;
        assert!(matrix_sqrt_psd(&s).is_err());
    }

    #[test]
    fn needs_enough_samples() {
        let f = DMatrix::<f64>::zeros(3, 3);
        assert!(FidStats::from_features(&f).is_err());
    }

    #[test]
    fn stability_of_constant_and_nan_logs() {
        let flat = vec![(0.5, 0.7); 40];
        let r = stability_scan(&flat, 10, 10.0).unwrap();
        assert!(!r.diverged);
        assert!(r.loss_d.window_var.iter().all(|&v| v == 0.0));
        let mut bad = flat.clone();
        bad[17].1 = f64::NAN;
        assert!(stability_scan(&bad, 10, 10.0).unwrap().diverged);
        assert!(stability_scan(&[], 1, 1.0).is_err());
    }
}
