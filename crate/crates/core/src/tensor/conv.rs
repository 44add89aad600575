//! Grouped 2-D convolution kernels (NCHW) via im2col + GEMM.
//!
//! Group `g` owns the contiguous input channel block `[g*Cin/G, (g+1)*Cin/G)`
//! and output block `[g*Cout/G, (g+1)*Cout/G)`. The three kernels here
//! (forward, input gradient, weight gradient) are mutually adjoint, which is
//! what lets the graph differentiate convolutions to any order.

use super::{Element, Tensor};
use crate::error::{config, contract, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvConfig {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvConfig {
    pub fn same(groups: usize, kernel: usize) -> Self {
        ConvConfig { stride: 1, padding: kernel / 2, groups }
    }

    fn out_size(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(config("stride must be positive"));
        }
        let padded = input + 2 * self.padding;
        if padded < kernel {
            return Err(contract(format!(
                "kernel {} larger than padded input {}",
                kernel, padded
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.padding == 0
    }
}

struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    groups: usize,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn k_g(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }
}

fn geometry(
    x_shape: &[usize],
    w_shape: &[usize],
    cfg: &ConvConfig,
) -> Result<Geometry> {
    if x_shape.len() != 4 || w_shape.len() != 4 {
        return Err(contract(format!(
            "conv2d expects rank-4 input and weight, got {:?} and {:?}",
            x_shape, w_shape
        )));
    }
    let (batch, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (cout, cin_g, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    let groups = cfg.groups;
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(config(format!(
            "channels in={} out={} not divisible by groups={}",
            cin, cout, groups
        )));
    }
    if cin_g * groups != cin {
        return Err(contract(format!(
            "weight expects {} input channels per group, input has {} over {} groups",
            cin_g, cin, groups
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(contract(format!("kernel {}x{} must be odd", kh, kw)));
    }
    let ho = cfg.out_size(h, kh)?;
    let wo = cfg.out_size(w, kw)?;
    Ok(Geometry { batch, cin, h, w, cout, kh, kw, ho, wo, groups })
}

/// Range of output columns `[lo, hi)` whose input column `ow*stride + j - pad`
/// falls inside `[0, w)`.
fn valid_cols(wo: usize, w: usize, stride: usize, j: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > j { (pad - j).div_ceil(stride) } else { 0 };
    let hi = if w + pad > j { ((w + pad - j - 1) / stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one group of one sample into `col[k_g, ho*wo]`.
fn im2col<T: Element>(x: &[T], geo: &Geometry, cfg: &ConvConfig, col: &mut [T]) {
    let hw_out = geo.hw_out();
    let (s, pad) = (cfg.stride, cfg.padding);
    for ci in 0..geo.cin_g() {
        let plane = &x[ci * geo.h * geo.w..(ci + 1) * geo.h * geo.w];
        for i in 0..geo.kh {
            for j in 0..geo.kw {
                let row = (ci * geo.kh + i) * geo.kw + j;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                let (lo, hi) = valid_cols(geo.wo, geo.w, s, j, pad);
                for oh in 0..geo.ho {
                    let line = &mut dst[oh * geo.wo..(oh + 1) * geo.wo];
                    let ih = oh * s + i;
                    if ih < pad || ih - pad >= geo.h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(ih - pad) * geo.w..(ih - pad + 1) * geo.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if s == 1 {
                        let first = lo + j - pad;
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (ow, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[(ow + lo) * s + j - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into one group of one sample.
fn col2im<T: Element>(col: &[T], geo: &Geometry, cfg: &ConvConfig, x: &mut [T]) {
    let hw_out = geo.hw_out();
    let (s, pad) = (cfg.stride, cfg.padding);
    for ci in 0..geo.cin_g() {
        let plane = &mut x[ci * geo.h * geo.w..(ci + 1) * geo.h * geo.w];
        for i in 0..geo.kh {
            for j in 0..geo.kw {
                let row = (ci * geo.kh + i) * geo.kw + j;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                let (lo, hi) = valid_cols(geo.wo, geo.w, s, j, pad);
                for oh in 0..geo.ho {
                    let ih = oh * s + i;
                    if ih < pad || ih - pad >= geo.h {
                        continue;
                    }
                    let dst = &mut plane[(ih - pad) * geo.w..(ih - pad + 1) * geo.w];
                    let line = &src[oh * geo.wo + lo..oh * geo.wo + hi];
                    if s == 1 {
                        let first = lo + j - pad;
                        for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(line) {
                            *d = *d + v;
                        }
                    } else {
                        for (ow, &v) in line.iter().enumerate() {
                            let d = &mut dst[(ow + lo) * s + j - pad];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// `y = conv(x, w)` without bias.
pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    cfg: &ConvConfig,
) -> Result<Tensor<T>> {
    let geo = geometry(x.shape(), w.shape(), cfg)?;
    let (cin_g, cout_g, k_g, hw_out) = (geo.cin_g(), geo.cout_g(), geo.k_g(), geo.hw_out());
    let mut y = Tensor::zeros(&[geo.batch, geo.cout, geo.ho, geo.wo]);
    let pointwise = cfg.is_pointwise(geo.kh, geo.kw);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k_g * hw_out] };
    let xs = x.data();
    let ws = w.data();
    let in_plane = geo.h * geo.w;
    let ys = y.data_mut();
    for b in 0..geo.batch {
        for g in 0..geo.groups {
            let x_off = (b * geo.cin + g * cin_g) * in_plane;
            let xg = &xs[x_off..x_off + cin_g * in_plane];
            let cols: &[T] = if pointwise {
                xg
            } else {
                im2col(xg, &geo, cfg, &mut col);
                &col
            };
            let wg = &ws[g * cout_g * k_g..(g + 1) * cout_g * k_g];
            let y_off = (b * geo.cout + g * cout_g) * hw_out;
            let yg = &mut ys[y_off..y_off + cout_g * hw_out];
            T::gemm(
                cout_g,
                k_g,
                hw_out,
                T::one(),
                wg,
                k_g as isize,
                1,
                cols,
                hw_out as isize,
                1,
                T::zero(),
                yg,
                hw_out as isize,
                1,
            );
        }
    }
    Ok(y)
}

/// Gradient of `sum(gy * conv(x, w))` with respect to `x`.
pub fn conv2d_input_grad<T: Element>(
    gy: &Tensor<T>,
    w: &Tensor<T>,
    cfg: &ConvConfig,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<T>> {
    let gs = gy.shape();
    if gs.len() != 4 {
        return Err(contract(format!("conv input grad expects rank-4 gradient, got {:?}", gs)));
    }
    let x_shape = [gs[0], w.shape()[1] * cfg.groups, in_h, in_w];
    let geo = geometry(&x_shape, w.shape(), cfg)?;
    if gs[1] != geo.cout || gs[2] != geo.ho || gs[3] != geo.wo {
        return Err(contract(format!(
            "gradient shape {:?} does not match conv output {:?}",
            gs,
            [geo.batch, geo.cout, geo.ho, geo.wo]
        )));
    }
    let (cin_g, cout_g, k_g, hw_out) = (geo.cin_g(), geo.cout_g(), geo.k_g(), geo.hw_out());
    let in_plane = geo.h * geo.w;
    let mut gx = Tensor::zeros(&x_shape);
    let pointwise = cfg.is_pointwise(geo.kh, geo.kw);
    let mut col = vec![T::zero(); if pointwise { 0 } else { k_g * hw_out }];
    let gys = gy.data();
    let ws = w.data();
    let gxs = gx.data_mut();
    for b in 0..geo.batch {
        for g in 0..geo.groups {
            let wg = &ws[g * cout_g * k_g..(g + 1) * cout_g * k_g];
            let y_off = (b * geo.cout + g * cout_g) * hw_out;
            let gyg = &gys[y_off..y_off + cout_g * hw_out];
            let x_off = (b * geo.cin + g * cin_g) * in_plane;
            let gxg = &mut gxs[x_off..x_off + cin_g * in_plane];
            let target: &mut [T] = if pointwise { gxg } else { &mut col };
            T::gemm(
                k_g,
                cout_g,
                hw_out,
                T::one(),
                wg,
                1,
                k_g as isize,
                gyg,
                hw_out as isize,
                1,
                T::zero(),
                target,
                hw_out as isize,
                1,
            );
            if !pointwise {
                col2im(&col, &geo, cfg, &mut gxs[x_off..x_off + cin_g * in_plane]);
            }
        }
    }
    Ok(gx)
}

/// Gradient of `sum(gy * conv(x, w))` with respect to `w`.
pub fn conv2d_weight_grad<T: Element>(
    x: &Tensor<T>,
    gy: &Tensor<T>,
    cfg: &ConvConfig,
    kh: usize,
    kw: usize,
) -> Result<Tensor<T>> {
    let xs_shape = x.shape();
    let gs = gy.shape();
    if xs_shape.len() != 4 || gs.len() != 4 {
        return Err(contract(format!(
            "conv weight grad expects rank-4 tensors, got {:?} and {:?}",
            xs_shape, gs
        )));
    }
    if cfg.groups == 0 || xs_shape[1] % cfg.groups != 0 {
        return Err(config(format!(
            "input channels {} not divisible by groups {}",
            xs_shape[1], cfg.groups
        )));
    }
    let w_shape = [gs[1], xs_shape[1] / cfg.groups, kh, kw];
    let geo = geometry(xs_shape, &w_shape, cfg)?;
    if gs[0] != geo.batch || gs[2] != geo.ho || gs[3] != geo.wo {
        return Err(contract(format!(
            "gradient shape {:?} does not match conv output {:?}",
            gs,
            [geo.batch, geo.cout, geo.ho, geo.wo]
        )));
    }
    let (cin_g, cout_g, k_g, hw_out) = (geo.cin_g(), geo.cout_g(), geo.k_g(), geo.hw_out());
    let in_plane = geo.h * geo.w;
    let mut gw = Tensor::zeros(&w_shape);
    let pointwise = cfg.is_pointwise(kh, kw);
    let mut col = vec![T::zero(); if pointwise { 0 } else { k_g * hw_out }];
    let xs = x.data();
    let gys = gy.data();
    let gws = gw.data_mut();
    for b in 0..geo.batch {
        for g in 0..geo.groups {
            let x_off = (b * geo.cin + g * cin_g) * in_plane;
            let xg = &xs[x_off..x_off + cin_g * in_plane];
            let cols: &[T] = if pointwise {
                xg
            } else {
                im2col(xg, &geo, cfg, &mut col);
                &col
            };
            let y_off = (b * geo.cout + g * cout_g) * hw_out;
            let gyg = &gys[y_off..y_off + cout_g * hw_out];
            let gwg = &mut gws[g * cout_g * k_g..(g + 1) * cout_g * k_g];
            T::gemm(
                cout_g,
                hw_out,
                k_g,
                T::one(),
                gyg,
                hw_out as isize,
                1,
                cols,
                1,
                hw_out as isize,
                T::one(),
                gwg,
                k_g as isize,
                1,
            );
        }
    }
    Ok(gw)
}
