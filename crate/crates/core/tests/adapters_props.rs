mod common;

use cagn_core::adapters::*;
use cagn_core::tensor::conv2d_forward;
use cagn_core::{ConvConfig, Graph, Tensor};
use common::oracles::{max_abs_diff, naive_conv2d};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn rand_params(rng: &mut ChaCha8Rng, c: usize, cfg: &LayerAdapterConfig) -> AdapterParams<Tensor<f64>> {
    let conv = |rng: &mut ChaCha8Rng, per: usize, k: usize| ConvParams { weight: rand_t(rng, &[c, per, k, k]), bias: rand_t(rng, &[c]) };
    AdapterParams {
        group3: conv(rng, cfg.k, 3),
        group1: cfg.uses_pointwise().then(|| conv(rng, cfg.z, 1)),
        residual: cfg.residual_bias.then(|| conv(rng, cfg.k, 3)),
    }
}

fn layer(k: usize, z: usize, beta: u8, residual: bool, mode: CombineMode) -> LayerAdapterConfig {
    LayerAdapterConfig { k, z, beta, mode, residual_bias: residual, init: InitScheme::NearIdentity }
}

fn run(x: &Tensor<f64>, prev: Option<&Tensor<f64>>, p: &AdapterParams<Tensor<f64>>, cfg: &LayerAdapterConfig) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pv = prev.map(|t| g.constant(t.clone()));
    let params = bind_adapter(&mut g, p, false);
    let out = adapter_forward(&mut g, xv, pv, &params, cfg).unwrap();
    g.value(out).clone()
}

/// Nearest upsampling plus channel `i mod c'`, by loops.
fn bridge_oracle(src: &Tensor<f64>, c: usize, h: usize) -> Tensor<f64> {
    let (b, cs, hs) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let f = h / hs;
    Tensor::from_fn(&[b, c, h, h], |i| {
        let (n, rem) = (i / (c * h * h), i % (c * h * h));
        let (ch, y, x) = (rem / (h * h), (rem / h) % h, rem % h);
        src.data()[((n * cs + ch % cs) * hs + y / f) * hs + x / f]
    })
}

#[test]
fn full_config_matches_composed_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for mode in [CombineMode::Parallel, CombineMode::Sequential] {
        let cfg = layer(2, 4, 1, true, mode);
        let (c, h) = (8, 6);
        let x = rand_t(&mut rng, &[2, c, h, h]);
        let prev = rand_t(&mut rng, &[2, 4, 3, 3]);
        let p = rand_params(&mut rng, c, &cfg);
        let got = run(&x, Some(&prev), &p, &cfg);
        let g3 = |input: &Tensor<f64>, q: &ConvParams<Tensor<f64>>, k: usize| naive_conv2d(input, &q.weight, Some(&q.bias), 1, 1, c / k);
        let pw = p.group1.as_ref().unwrap();
        let g1 = |input: &Tensor<f64>| naive_conv2d(input, &pw.weight, Some(&pw.bias), 1, 0, c / 4);
        let m = match mode {
            CombineMode::Parallel => g3(&x, &p.group3, 2).zip_map(&g1(&x), |a, b| a + b).unwrap(),
            CombineMode::Sequential => g1(&g3(&x, &p.group3, 2)),
        };
        let mr = g3(&bridge_oracle(&prev, c, h), p.residual.as_ref().unwrap(), 2);
        let want = m.zip_map(&mr, |a, b| a + b).unwrap();
        assert!(max_abs_diff(got.data(), want.data()) < 1e-5, "{:?}", mode);
    }
}

#[test]
fn weight_ratios_are_exact() {
    for c in [16usize, 32, 64] {
        for k in [2usize, 4, 8] {
            let cfg = layer(k, k, 1, false, CombineMode::Parallel);
            let shapes = adapter_shapes(c, &cfg);
            let count = |name: &str| shapes.iter().find(|s| s.0 == name).unwrap().1.iter().product::<usize>();
            assert_eq!((9 * c * c) % count("g.w"), 0);
            assert_eq!(9 * c * c / count("g.w"), c / k);
            assert_eq!(c * c / count("p.w"), c / k);
            assert_eq!(count("g.w") * c, 9 * c * c * k);
        }
    }
}

#[test]
fn gate_soundness() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = rand_t(&mut rng, &[1, 8, 4, 4]);
    let on = layer(2, 4, 1, false, CombineMode::Parallel);
    let off = layer(2, 4, 0, false, CombineMode::Parallel);
    let mut p = rand_params(&mut rng, 8, &on);
    let closed = AdapterParams { group3: p.group3.clone(), group1: None, residual: None };
    let p1 = p.group1.as_mut().unwrap();
    p1.weight = Tensor::zeros(&[8, 4, 1, 1]);
    p1.bias = Tensor::zeros(&[8]);
    let a = run(&x, None, &closed, &off);
    let b = run(&x, None, &p, &on);
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn parallel_cancellation_and_exact_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mg = rand_t(&mut rng, &[1, 4, 3, 3]);
    let mut g = Graph::new();
    let a = g.constant(mg.clone());
    let neg = g.constant(mg.map(|v| -v));
    let z = combine_parallel(&mut g, a, neg, 1).unwrap();
    assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    let other = rand_t(&mut rng, &[1, 4, 3, 3]);
    let o = g.constant(other.clone());
    let s = combine_parallel(&mut g, a, o, 1).unwrap();
    let want: Vec<f64> = mg.data().iter().zip(other.data()).map(|(p, q)| p + q).collect();
    assert_eq!(g.value(s).data(), want.as_slice());
    let bad = g.constant(Tensor::zeros(&[1, 4, 3, 2]));
    assert!(combine_parallel(&mut g, a, bad, 1).is_err());
}

#[test]
fn sequential_with_zero_pointwise_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let cfg = layer(2, 2, 1, false, CombineMode::Sequential);
    let mut p = rand_params(&mut rng, 4, &cfg);
    let q = p.group1.as_mut().unwrap();
    q.weight = Tensor::zeros(&[4, 2, 1, 1]);
    q.bias = Tensor::zeros(&[4]);
    let out = run(&rand_t(&mut rng, &[1, 4, 5, 5]), None, &p, &cfg);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn residual_with_matching_shapes_is_one_grouped_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let prev = rand_t(&mut rng, &[2, 4, 5, 5]);
    let r = ConvParams { weight: rand_t(&mut rng, &[4, 2, 3, 3]), bias: rand_t(&mut rng, &[4]) };
    let mut g = Graph::new();
    let pv = g.constant(prev.clone());
    let rv = r.map(|t| g.constant(t.clone()));
    let out = residual_bias_apply(&mut g, pv, &rv, [2, 4, 5, 5]).unwrap();
    let want = naive_conv2d(&prev, &r.weight, Some(&r.bias), 1, 1, 2);
    assert!(max_abs_diff(g.value(out).data(), want.data()) < 1e-6);
}

#[test]
fn every_map_keeps_the_input_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let cfg = layer(4, 2, 1, true, CombineMode::Parallel);
    let p = rand_params(&mut rng, 8, &cfg);
    let x = rand_t(&mut rng, &[3, 8, 8, 8]);
    let out = run(&x, Some(&rand_t(&mut rng, &[3, 16, 4, 4])), &p, &cfg);
    assert_eq!(out.shape(), x.shape());
    let standard = conv2d_forward(&x, &p.group3.weight, &ConvConfig { stride: 1, padding: 1, groups: 2 }).unwrap();
    assert_eq!(standard.shape(), x.shape());
}
