//! Independent reference implementations for tests: plain loops, no im2col.
#![allow(dead_code)]

use cagn_core::Tensor;

/// Direct grouped convolution over NCHW.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cpg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cpg * groups, cin);
    let opg = cout / groups;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; b * cout * ho * wo];
    for n in 0..b {
        for o in 0..cout {
            let g = o / opg;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bb| bb.data()[o]);
                    for ci in 0..cpg {
                        let c = g * cpg + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xd[((n * cin + c) * h + iy as usize) * wd + ix as usize];
                                acc += xv * wdat[((o * cpg + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((n * cout + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, cout, ho, wo], out).unwrap()
}

/// Embeds a grouped weight `[C_out, C_in/G, kh, kw]` into an ungrouped one
/// that is zero outside the diagonal blocks.
pub fn block_diagonal(w: &Tensor<f64>, groups: usize) -> Tensor<f64> {
    let (cout, cpg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let cin = cpg * groups;
    let opg = cout / groups;
    let mut out = vec![0.0; cout * cin * kh * kw];
    for o in 0..cout {
        let g = o / opg;
        for ci in 0..cpg {
            for k in 0..kh * kw {
                out[(o * cin + g * cpg + ci) * kh * kw + k] = w.data()[(o * cpg + ci) * kh * kw + k];
            }
        }
    }
    Tensor::new(vec![cout, cin, kh, kw], out).unwrap()
}

/// `x W^T + b` by double loop.
pub fn naive_dense(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, fin) = (x.shape()[0], x.shape()[1]);
    let fout = w.shape()[0];
    let mut out = vec![0.0; n * fout];
    for i in 0..n {
        for o in 0..fout {
            let mut acc = b.data()[o];
            for k in 0..fin {
                acc += x.data()[i * fin + k] * w.data()[o * fin + k];
            }
            out[i * fout + o] = acc;
        }
    }
    Tensor::new(vec![n, fout], out).unwrap()
}

/// Fréchet distance between diagonal Gaussians.
pub fn diagonal_fid(mu1: &[f64], var1: &[f64], mu2: &[f64], var2: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..mu1.len() {
        s += (mu1[i] - mu2[i]).powi(2) + var1[i] + var2[i] - 2.0 * (var1[i] * var2[i]).sqrt();
    }
    s
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Numerically stable softplus.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
