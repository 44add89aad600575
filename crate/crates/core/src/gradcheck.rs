//! Central finite-difference gradient checking.

use crate::adapters::{
    adapter_forward, combine_sequential, gco1x1_apply, gco3x3_apply, residual_bias_apply, AdapterParams,
    CombineMode, ConvParams, InitScheme, LayerAdapterConfig,
};
use crate::error::Result;
use crate::tensor::{ConvConfig, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error `|a - n| / max(|a|, |n|)` in the Euclidean norm between
/// analytic and numeric gradients; 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences with step `eps`, for every input. Returns the worst relative
/// error over inputs.
pub fn check<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let grads = g.grad(y, &vars, false)?;
    let analytic: Vec<Tensor<f64>> = grads
        .iter()
        .zip(inputs)
        .map(|(gv, t)| match gv {
            Some(v) => g.value(*v).clone(),
            None => Tensor::zeros(t.shape()),
        })
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        Ok(g.value(y).item())
    };

    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + eps;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = orig - eps;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            *n = (up - down) / (2.0 * eps);
        }
        worst = worst.max(relative_error(a.data(), &numeric));
    }
    Ok(worst)
}

/// A named differentiable operation with a randomized check.
pub struct OpCheck {
    pub name: &'static str,
    /// Worst relative error for one random instance drawn from `seed`.
    pub run: fn(u64) -> Result<f64>,
}

const EPS: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_C0DE)
}

fn rand_t(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so kinks stay outside the FD stencil.
fn rand_away(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = r.gen_range(0.05..1.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(y * R)` for a fixed random `R`, so every output element matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let w = g.constant(rand_t(g.shape(y), &mut r));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Second-order form `sum(dL/dx ^ 2)` where `L = project(f(x))`.
fn grad_norm(g: &mut Graph<f64>, y: Var, x: Var, seed: u64) -> Result<Var> {
    let l = project(g, y, seed)?;
    let gx = g.grad(l, &[x], true)?[0].ok_or_else(|| crate::error::contract("no path to input"))?;
    let sq = g.square(gx);
    Ok(g.sum(sq))
}

fn dims(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.gen_range(lo..=hi)
}

fn conv_case(r: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>, ConvConfig) {
    let groups = [1, 2][r.gen_range(0..2)];
    let cin = groups * dims(r, 1, 2);
    let cout = groups * dims(r, 1, 2);
    let k = [1, 3][r.gen_range(0..2)];
    let stride = dims(r, 1, 2);
    let padding = r.gen_range(0..=k / 2 + 1);
    let (h, w) = (dims(r, 3, 5), dims(r, 3, 5));
    (vec![2, cin, h, w], vec![cout, cin / groups, k, k], ConvConfig { stride, padding, groups })
}

fn adapter_case(r: &mut ChaCha8Rng) -> (usize, usize, usize) {
    let k = [1, 2][r.gen_range(0..2)];
    let z = [1, 2][r.gen_range(0..2)];
    (4, k, z)
}

/// Every differentiable operation of the engine and the adapters, plus
/// second-order checks of the ops used under the R1 penalty.
pub fn op_suite() -> Vec<OpCheck> {
    vec![
        OpCheck { name: "add", run: |s| {
            let mut r = rng(s);
            let sh = [dims(&mut r, 1, 3), dims(&mut r, 1, 4)];
            check(&[rand_t(&sh, &mut r), rand_t(&sh, &mut r)], EPS, |g, v| { let y = g.add(v[0], v[1])?; project(g, y, s) })
        }},
        OpCheck { name: "mul", run: |s| {
            let mut r = rng(s);
            let sh = [dims(&mut r, 1, 3), dims(&mut r, 1, 4)];
            check(&[rand_t(&sh, &mut r), rand_t(&sh, &mut r)], EPS, |g, v| { let y = g.mul(v[0], v[1])?; project(g, y, s) })
        }},
        OpCheck { name: "scale", run: |s| {
            let mut r = rng(s);
            let k = r.gen_range(-2.0..2.0);
            check(&[rand_t(&[3, 2], &mut r)], EPS, |g, v| { let y = g.scale(v[0], k); project(g, y, s) })
        }},
        OpCheck { name: "add_scalar", run: |s| {
            let mut r = rng(s);
            let k = r.gen_range(-2.0..2.0);
            check(&[rand_t(&[3, 2], &mut r)], EPS, |g, v| { let y = g.add_scalar(v[0], k); project(g, y, s) })
        }},
        OpCheck { name: "leaky_relu", run: |s| {
            let mut r = rng(s);
            let a = r.gen_range(0.05..0.5);
            check(&[rand_away(&[2, 3, 2, 2], &mut r)], EPS, |g, v| { let y = g.leaky_relu(v[0], a)?; project(g, y, s) })
        }},
        OpCheck { name: "tanh", run: |s| {
            let mut r = rng(s);
            check(&[rand_t(&[4, 3], &mut r)], EPS, |g, v| { let y = g.tanh(v[0]); project(g, y, s) })
        }},
        OpCheck { name: "sigmoid", run: |s| {
            let mut r = rng(s);
            check(&[rand_t(&[4, 3], &mut r)], EPS, |g, v| { let y = g.sigmoid(v[0]); project(g, y, s) })
        }},
        OpCheck { name: "softplus", run: |s| {
            let mut r = rng(s);
            let x = rand_t(&[4, 3], &mut r).map(|v| v * 4.0);
            check(&[x], EPS, |g, v| { let y = g.softplus(v[0]); project(g, y, s) })
        }},
        OpCheck { name: "reshape", run: |s| {
            let mut r = rng(s);
            check(&[rand_t(&[2, 6], &mut r)], EPS, |g, v| { let y = g.reshape(v[0], &[3, 4])?; project(g, y, s) })
        }},
        OpCheck { name: "sum_mean", run: |s| {
            let mut r = rng(s);
            check(&[rand_t(&[3, 4], &mut r)], EPS, |g, v| {
                let a = g.sum(v[0]);
                let m = g.mean(v[0]);
                let p = g.mul(a, m)?;
                Ok(p)
            })
        }},
        OpCheck { name: "sum_axis1", run: |s| {
            let mut r = rng(s);
            check(&[rand_t(&[3, 5], &mut r)], EPS, |g, v| { let y = g.sum_axis1(v[0])?; project(g, y, s) })
        }},
        OpCheck { name: "broadcast_channel", run: |s| {
            let mut r = rng(s);
            check(&[rand_t(&[3], &mut r)], EPS, |g, v| { let y = g.broadcast_channel(v[0], &[2, 3, 2, 2])?; project(g, y, s) })
        }},
        OpCheck { name: "sum_channel", run: |s| {
            let mut r = rng(s);
            check(&[rand_t(&[2, 3, 2, 2], &mut r)], EPS, |g, v| { let y = g.sum_channel(v[0])?; project(g, y, s) })
        }},
        OpCheck { name: "matmul", run: |s| {
            let mut r = rng(s);
            let (m, k, n) = (dims(&mut r, 1, 3), dims(&mut r, 1, 4), dims(&mut r, 1, 3));
            let (ta, tb) = (r.gen_bool(0.5), r.gen_bool(0.5));
            let a = rand_t(&if ta { [k, m] } else { [m, k] }, &mut r);
            let b = rand_t(&if tb { [n, k] } else { [k, n] }, &mut r);
            check(&[a, b], EPS, |g, v| { let y = g.matmul(v[0], v[1], ta, tb)?; project(g, y, s) })
        }},
        OpCheck { name: "dense", run: |s| {
            let mut r = rng(s);
            let (b, fi, fo) = (dims(&mut r, 1, 3), dims(&mut r, 1, 4), dims(&mut r, 1, 3));
            check(&[rand_t(&[b, fi], &mut r), rand_t(&[fo, fi], &mut r), rand_t(&[fo], &mut r)], EPS, |g, v| {
                let y = g.dense(v[0], v[1], Some(v[2]))?;
                project(g, y, s)
            })
        }},
        OpCheck { name: "conv2d", run: |s| {
            let mut r = rng(s);
            let (xs, ws, cfg) = conv_case(&mut r);
            let bias = rand_t(&[ws[0]], &mut r);
            check(&[rand_t(&xs, &mut r), rand_t(&ws, &mut r), bias], EPS, |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), cfg)?;
                project(g, y, s)
            })
        }},
        OpCheck { name: "upsample2", run: |s| {
            let mut r = rng(s);
            check(&[rand_t(&[2, 2, 2, 3], &mut r)], EPS, |g, v| { let y = g.upsample2(v[0])?; project(g, y, s) })
        }},
        OpCheck { name: "avg_pool2", run: |s| {
            let mut r = rng(s);
            check(&[rand_t(&[2, 2, 4, 2], &mut r)], EPS, |g, v| { let y = g.avg_pool2(v[0])?; project(g, y, s) })
        }},
        OpCheck { name: "concat_channels", run: |s| {
            let mut r = rng(s);
            check(&[rand_t(&[2, 1, 3], &mut r), rand_t(&[2, 2, 3], &mut r)], EPS, |g, v| {
                let y = g.concat_channels(&[v[0], v[1], v[0]])?;
                project(g, y, s)
            })
        }},
        OpCheck { name: "slice_channels", run: |s| {
            let mut r = rng(s);
            check(&[rand_t(&[2, 4, 3], &mut r)], EPS, |g, v| { let y = g.slice_channels(v[0], 1, 2)?; project(g, y, s) })
        }},
        OpCheck { name: "gather_channels", run: |s| {
            let mut r = rng(s);
            let idx: Vec<usize> = (0..5).map(|_| r.gen_range(0..3)).collect();
            check(&[rand_t(&[2, 3, 2, 2], &mut r)], EPS, |g, v| { let y = g.gather_channels(v[0], &idx)?; project(g, y, s) })
        }},
        OpCheck { name: "log_softmax", run: |s| {
            let mut r = rng(s);
            check(&[rand_t(&[3, 4], &mut r)], EPS, |g, v| { let y = g.log_softmax(v[0])?; project(g, y, s) })
        }},
        OpCheck { name: "gco3x3", run: |s| {
            let mut r = rng(s);
            let (c, k, _) = adapter_case(&mut r);
            let ins = [rand_t(&[2, c, 3, 3], &mut r), rand_t(&[c, k, 3, 3], &mut r), rand_t(&[c], &mut r)];
            check(&ins, EPS, |g, v| {
                let y = gco3x3_apply(g, v[0], &ConvParams { weight: v[1], bias: v[2] }, k)?;
                project(g, y, s)
            })
        }},
        OpCheck { name: "gco1x1", run: |s| {
            let mut r = rng(s);
            let (c, _, z) = adapter_case(&mut r);
            let ins = [rand_t(&[2, c, 3, 3], &mut r), rand_t(&[c, z, 1, 1], &mut r), rand_t(&[c], &mut r)];
            check(&ins, EPS, |g, v| {
                let y = gco1x1_apply(g, v[0], &ConvParams { weight: v[1], bias: v[2] }, z)?;
                project(g, y, s)
            })
        }},
        OpCheck { name: "combine_sequential", run: |s| {
            let mut r = rng(s);
            let (c, k, z) = adapter_case(&mut r);
            let ins = [
                rand_t(&[2, c, 3, 3], &mut r),
                rand_t(&[c, k, 3, 3], &mut r),
                rand_t(&[c], &mut r),
                rand_t(&[c, z, 1, 1], &mut r),
                rand_t(&[c], &mut r),
            ];
            check(&ins, EPS, |g, v| {
                let y = combine_sequential(
                    g,
                    v[0],
                    &ConvParams { weight: v[1], bias: v[2] },
                    &ConvParams { weight: v[3], bias: v[4] },
                    k,
                    z,
                )?;
                project(g, y, s)
            })
        }},
        OpCheck { name: "residual_bias", run: |s| {
            let mut r = rng(s);
            let (c, k, _) = adapter_case(&mut r);
            let src_c = [2, 4, 8][r.gen_range(0..3)];
            let ins = [rand_t(&[2, src_c, 2, 2], &mut r), rand_t(&[c, k, 3, 3], &mut r), rand_t(&[c], &mut r)];
            check(&ins, EPS, |g, v| {
                let y = residual_bias_apply(g, v[0], &ConvParams { weight: v[1], bias: v[2] }, [2, c, 4, 4])?;
                project(g, y, s)
            })
        }},
        OpCheck { name: "adapter_forward", run: |s| {
            let mut r = rng(s);
            let (c, k, z) = adapter_case(&mut r);
            let cfg = LayerAdapterConfig {
                k,
                z,
                beta: 1,
                mode: CombineMode::Parallel,
                residual_bias: true,
                init: InitScheme::NearIdentity,
            };
            let ins = [
                rand_t(&[2, c, 4, 4], &mut r),
                rand_t(&[2, c, 2, 2], &mut r),
                rand_t(&[c, k, 3, 3], &mut r),
                rand_t(&[c], &mut r),
                rand_t(&[c, z, 1, 1], &mut r),
                rand_t(&[c], &mut r),
                rand_t(&[c, k, 3, 3], &mut r),
                rand_t(&[c], &mut r),
            ];
            check(&ins, EPS, |g, v| {
                let p = AdapterParams {
                    group3: ConvParams { weight: v[2], bias: v[3] },
                    group1: Some(ConvParams { weight: v[4], bias: v[5] }),
                    residual: Some(ConvParams { weight: v[6], bias: v[7] }),
                };
                let y = adapter_forward(g, v[0], Some(v[1]), &p, &cfg)?;
                project(g, y, s)
            })
        }},
        OpCheck { name: "second_order_conv", run: |s| {
            let mut r = rng(s);
            let (xs, ws, cfg) = conv_case(&mut r);
            check(&[rand_t(&xs, &mut r), rand_t(&ws, &mut r)], EPS, |g, v| {
                let y = g.conv2d(v[0], v[1], None, cfg)?;
                let t = g.tanh(y);
                grad_norm(g, t, v[0], s)
            })
        }},
        OpCheck { name: "second_order_leaky_relu", run: |s| {
            let mut r = rng(s);
            check(&[rand_away(&[2, 2, 3, 3], &mut r), rand_t(&[2, 2, 3, 3], &mut r)], EPS, |g, v| {
                let y = g.conv2d(v[0], v[1], None, ConvConfig::same(1, 3))?;
                let a = g.leaky_relu(v[0], 0.2)?;
                let m = g.mul(a, y)?;
                grad_norm(g, m, v[0], s)
            })
        }},
        OpCheck { name: "second_order_dense_softplus", run: |s| {
            let mut r = rng(s);
            check(&[rand_t(&[3, 4], &mut r), rand_t(&[2, 4], &mut r)], EPS, |g, v| {
                let y = g.dense(v[0], v[1], None)?;
                let sp = g.softplus(y);
                let sg = g.sigmoid(sp);
                grad_norm(g, sg, v[0], s)
            })
        }},
        OpCheck { name: "second_order_resample", run: |s| {
            let mut r = rng(s);
            check(&[rand_t(&[1, 2, 2, 2], &mut r), rand_t(&[2, 2, 3, 3], &mut r)], EPS, |g, v| {
                let u = g.upsample2(v[0])?;
                let y = g.conv2d(u, v[1], None, ConvConfig::same(1, 3))?;
                let t = g.tanh(y);
                let p = g.avg_pool2(t)?;
                let gc = g.gather_channels(p, &[1, 0, 1])?;
                grad_norm(g, gc, v[0], s)
            })
        }},
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_quadratic() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let err = check(&[x], 1e-5, |g, v| {
            let s = g.square(v[0]);
            Ok(g.sum(s))
        })
        .unwrap();
        assert!(err < 1e-9, "{}", err);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        assert!(relative_error(&[1.0, 0.0], &[0.0, 1.0]) > 0.5);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }
}
