use cagn_core::adapters::AdapterConfig;
use cagn_core::gan::{BlockSpec, FreezeMask, GanTrainer, GeneratorSpec, TrainConfig};
use cagn_core::metrics::{proxy_fid, FeatureExtractor};
use cagn_core::tensor::conv2d_forward;
use cagn_core::{ConvConfig, Tensor};
use criterion::{black_box, criterion_group, criterion_main, Criterion};

fn ramp(shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| ((i * 7919) % 1000) as f32 / 500.0 - 1.0)
}

fn conv(c: &mut Criterion) {
    let x = ramp(&[8, 32, 16, 16]);
    for groups in [1usize, 4, 16] {
        let w = ramp(&[32, 32 / groups, 3, 3]);
        let cfg = ConvConfig { stride: 1, padding: 1, groups };
        c.bench_function(&format!("conv3x3_c32_g{}", groups), |b| {
            b.iter(|| conv2d_forward(black_box(&x), black_box(&w), &cfg).unwrap())
        });
    }
}

fn train_step(c: &mut Criterion) {
    let spec = GeneratorSpec {
        latent_dim: 32,
        base_channels: 16,
        blocks: vec![BlockSpec { channels: 16, upsample: true }, BlockSpec { channels: 16, upsample: true }],
        ..GeneratorSpec::default()
    };
    let acfg = AdapterConfig::default();
    let cfg = TrainConfig { batch: 8, ..TrainConfig::default() };
    let mut trainer = GanTrainer::new(spec.clone(), acfg.clone(), cfg, 1).unwrap();
    let mut theta = spec.init_theta::<f32>(&acfg, 2).unwrap();
    let mut phi = spec.init_task::<f32>(&acfg, 3).unwrap();
    let mut psi = trainer.disc.init_psi::<f32>(4);
    let mask = FreezeMask::all_theta(&theta);
    let images = ramp(&[32, 3, 16, 16]);
    let labels = vec![0; 32];
    c.bench_function("adapter_step_16x16", |b| {
        b.iter(|| trainer.step(&mut theta, Some(&mut phi), &mut psi, &mask, &images, &labels).unwrap())
    });
}

fn fid(c: &mut Criterion) {
    let ex = FeatureExtractor::new(1234, 3);
    let a = ramp(&[128, 3, 16, 16]);
    let b = a.map(|v| -v);
    c.bench_function("proxy_fid_128x16x16", |bch| bch.iter(|| proxy_fid(&ex, black_box(&a), black_box(&b)).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, train_step, fid
}
criterion_main!(benches);
