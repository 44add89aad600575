mod common;

use cagn_core::adapters::AdapterConfig;
use cagn_core::continual::hash_params;
use cagn_core::gan::*;
use cagn_core::{Error, Graph, Tensor};
use common::oracles::softplus;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_spec() -> GeneratorSpec {
    GeneratorSpec {
        latent_dim: 8,
        base_channels: 8,
        blocks: vec![BlockSpec { channels: 8, upsample: true }],
        ..GeneratorSpec::default()
    }
}

fn tiny_images(n: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, 3, 8, 8], |_| rng.gen_range(-1.0..1.0))
}

/// R1 of a linear discriminator `D(x) = <w, x>` on `[B, F]` inputs.
fn linear_r1(w: &[f64], b: usize, gamma: f64) -> f64 {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_fn(&[b, w.len()], |i| i as f64 * 0.01), true);
    let wv = g.constant(Tensor::new(vec![1, w.len()], w.to_vec()).unwrap());
    let logits = g.dense(x, wv, None).unwrap();
    let r1 = r1_penalty(&mut g, x, logits, gamma).unwrap();
    g.value(r1).item()
}

#[test]
fn r1_of_linear_discriminator_is_closed_form() {
    let w = [0.5, -1.5, 2.0, 0.25];
    let norm2: f64 = w.iter().map(|v| v * v).sum();
    for b in [1, 3, 8] {
        // Every sample contributes |w|^2, averaged over the batch.
        assert!((linear_r1(&w, b, 10.0) - 5.0 * norm2).abs() < 1e-6);
    }
    let r = linear_r1(&w, 4, 3.0);
    assert!((linear_r1(&w, 4, 6.0) - 2.0 * r).abs() < 1e-9);
}

#[test]
fn r1_rejects_a_constant_input() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    let l = g.sum(x);
    assert!(matches!(r1_penalty(&mut g, x, l, 1.0), Err(Error::Contract(_))));
}

#[test]
fn zero_discriminator_losses() {
    let mut g = Graph::<f64>::new();
    let real = g.constant(Tensor::zeros(&[5]));
    let fake = g.constant(Tensor::zeros(&[5]));
    let (d, gl) = gan_losses(&mut g, real, fake, LossVariant::NonSaturating).unwrap();
    let ln2 = std::f64::consts::LN_2;
    assert!((g.value(d).item() - 2.0 * ln2).abs() < 1e-12);
    assert!((g.value(gl).item() - ln2).abs() < 1e-12);
}

#[test]
fn losses_match_softplus_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let r: Vec<f64> = (0..6).map(|_| rng.gen_range(-40.0..40.0)).collect();
    let f: Vec<f64> = (0..6).map(|_| rng.gen_range(-40.0..40.0)).collect();
    let mut g = Graph::<f64>::new();
    let rv = g.constant(Tensor::new(vec![6], r.clone()).unwrap());
    let fv = g.constant(Tensor::new(vec![6], f.clone()).unwrap());
    let (d, gl) = gan_losses(&mut g, rv, fv, LossVariant::NonSaturating).unwrap();
    let want_d = r.iter().map(|&v| softplus(-v)).sum::<f64>() / 6.0 + f.iter().map(|&v| softplus(v)).sum::<f64>() / 6.0;
    let want_g = f.iter().map(|&v| softplus(-v)).sum::<f64>() / 6.0;
    assert!((g.value(d).item() - want_d).abs() < 1e-9);
    assert!((g.value(gl).item() - want_g).abs() < 1e-9);
    let m = generator_loss(&mut g, fv, LossVariant::Minimax);
    let want_m = -f.iter().map(|&v| softplus(v)).sum::<f64>() / 6.0;
    assert!((g.value(m).item() - want_m).abs() < 1e-9);
    let short = g.constant(Tensor::zeros(&[5]));
    assert!(gan_losses(&mut g, rv, short, LossVariant::NonSaturating).is_err());
}

struct Setup {
    trainer: GanTrainer,
    theta: ParamMap<f32>,
    phi: TaskParams<Tensor<f32>>,
    psi: ParamMap<f32>,
}

fn setup(seed: u64) -> Setup {
    let spec = tiny_spec();
    let acfg = AdapterConfig { k: 4, z: 4, ..AdapterConfig::default() };
    let cfg = TrainConfig { batch: 4, ..TrainConfig::default() };
    let trainer = GanTrainer::new(spec.clone(), acfg.clone(), cfg, seed).unwrap();
    Setup {
        theta: spec.init_theta(&acfg, 1).unwrap(),
        phi: spec.init_task(&acfg, 2).unwrap(),
        psi: trainer.disc.init_psi(3),
        trainer,
    }
}

fn phi_hash(p: &TaskParams<Tensor<f32>>) -> String {
    let named = p.to_named();
    hash_params(named.iter().map(|(k, v)| (k.as_str(), v)))
}

fn theta_hash(t: &ParamMap<f32>) -> String {
    hash_params(t.iter().map(|(k, v)| (k.as_str(), v)))
}

#[test]
fn frozen_everything_changes_nothing() {
    let mut s = setup(40);
    let imgs = tiny_images(6, 1);
    let mask = FreezeMask { theta: s.theta.keys().cloned().collect(), phi: true, psi: true };
    let before = (theta_hash(&s.theta), phi_hash(&s.phi), theta_hash(&s.psi));
    for _ in 0..3 {
        s.trainer.step(&mut s.theta, Some(&mut s.phi), &mut s.psi, &mask, &imgs, &[0; 6]).unwrap();
    }
    assert_eq!(before, (theta_hash(&s.theta), phi_hash(&s.phi), theta_hash(&s.psi)));
}

#[test]
fn frozen_theta_keeps_its_hash_while_phi_moves() {
    let mut s = setup(41);
    let imgs = tiny_images(6, 2);
    let mask = FreezeMask::all_theta(&s.theta);
    let (t0, p0, d0) = (theta_hash(&s.theta), phi_hash(&s.phi), theta_hash(&s.psi));
    for _ in 0..3 {
        let st = s.trainer.step(&mut s.theta, Some(&mut s.phi), &mut s.psi, &mask, &imgs, &[0; 6]).unwrap();
        assert!(st.loss_d.is_finite() && st.loss_g.is_finite() && st.r1 >= 0.0);
    }
    assert_eq!(t0, theta_hash(&s.theta));
    assert_ne!(p0, phi_hash(&s.phi));
    assert_ne!(d0, theta_hash(&s.psi));
}

#[test]
fn generator_forward_is_pure_and_shaped() {
    let spec = GeneratorSpec { embed_dim: 0, ..tiny_spec() };
    let on = AdapterConfig { k: 4, z: 4, residual_bias: false, ..AdapterConfig::default() };
    let off = AdapterConfig { enabled: false, ..on.clone() };
    let theta = spec.init_theta::<f64>(&on, 5).unwrap();
    let mut phi = spec.init_task::<f64>(&on, 6).unwrap();
    for (_, t) in phi.entries_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let run = |acfg: &AdapterConfig, phi: Option<&TaskParams<Tensor<f64>>>| {
        let mut g = Graph::<f64>::new();
        let tv = bind_params(&mut g, &theta, |_| false);
        let pv = phi.map(|p| p.map(|t| g.constant(t.clone())));
        let z = g.constant(Tensor::from_fn(&[2, spec.latent_dim], |i| (i as f64 * 0.37).sin()));
        let out = generator_forward(&mut g, &spec, acfg, &tv, pv.as_ref(), z, None);
        out.map(|o| g.value(o).clone())
    };
    let a = run(&on, Some(&phi)).unwrap();
    assert!(a.all_finite());
    assert_eq!(a.shape(), &[2, 3, 8, 8]);
    let b = run(&on, Some(&phi)).unwrap();
    assert_eq!(a.data(), b.data());
    assert!(run(&off, None).is_ok());
    assert!(run(&off, Some(&phi)).is_err());
    assert!(run(&on, None).is_err());
}

#[test]
fn training_is_deterministic_per_seed() {
    let run = |seed| {
        let mut s = setup(seed);
        let imgs = tiny_images(6, 3);
        let mask = FreezeMask::all_theta(&s.theta);
        let stats: Vec<_> = (0..3)
            .map(|_| s.trainer.step(&mut s.theta, Some(&mut s.phi), &mut s.psi, &mask, &imgs, &[0; 6]).unwrap())
            .collect();
        (stats.iter().map(|s| s.loss_d.to_bits()).collect::<Vec<_>>(), phi_hash(&s.phi))
    };
    assert_eq!(run(7), run(7));
    assert_ne!(run(7), run(8));
}

#[test]
fn conditional_generator_requires_labels() {
    let spec = GeneratorSpec { conditional: true, n_labels: 3, embed_dim: 4, ..tiny_spec() };
    let acfg = AdapterConfig { k: 4, z: 4, ..AdapterConfig::default() };
    let theta = spec.init_theta::<f64>(&acfg, 1).unwrap();
    let phi = spec.init_task::<f64>(&acfg, 2).unwrap();
    let mut g = Graph::<f64>::new();
    let tv = bind_params(&mut g, &theta, |_| false);
    let pv = phi.map(|t| g.constant(t.clone()));
    let z = g.constant(Tensor::zeros(&[2, spec.latent_dim]));
    assert!(generator_forward(&mut g, &spec, &acfg, &tv, Some(&pv), z, None).is_err());
    assert!(generator_forward(&mut g, &spec, &acfg, &tv, Some(&pv), z, Some(&[0, 5])).is_err());
    assert!(generator_forward(&mut g, &spec, &acfg, &tv, Some(&pv), z, Some(&[0, 2])).is_ok());
}

#[test]
fn mismatched_labels_are_rejected_by_step() {
    let mut s = setup(42);
    let imgs = tiny_images(4, 4);
    let mask = FreezeMask::default();
    let r = s.trainer.step(&mut s.theta, Some(&mut s.phi), &mut s.psi, &mask, &imgs, &[0; 3]);
    assert!(matches!(r, Err(Error::Contract(_))));
}
