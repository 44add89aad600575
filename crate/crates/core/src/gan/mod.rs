//! ResNet generator/discriminator pair, adversarial losses, R1 and the
//! alternating training step.

mod discriminator;
mod generator;
mod loss;
mod train;

pub use discriminator::{discriminator_forward, DiscBlock, DiscriminatorSpec};
pub use generator::{generator_forward, BlockSpec, GeneratorSpec, LayerInfo, TaskParams};
pub use loss::{discriminator_loss, gan_losses, generator_loss, r1_penalty, LossVariant};
pub use train::{FreezeMask, GanTrainer, StepStats, TrainConfig};

use crate::error::{contract, Result};
use crate::tensor::{Element, Graph, Tensor, Var};
use rand::Rng;
use std::collections::BTreeMap;

/// Named parameter tensors.
pub type ParamMap<T> = BTreeMap<String, Tensor<T>>;
/// Named graph handles.
pub type VarMap = BTreeMap<String, Var>;

/// Leaky ReLU slope used throughout both networks.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Scale on the residual branch of every ResNet block.
pub const RESIDUAL_SCALE: f64 = 0.1;

/// Registers every tensor of `params` as a leaf; `trainable` decides per name.
pub fn bind_params<T: Element>(
    g: &mut Graph<T>,
    params: &ParamMap<T>,
    trainable: impl Fn(&str) -> bool,
) -> VarMap {
    params
        .iter()
        .map(|(name, t)| (name.clone(), g.leaf(t.clone(), trainable(name))))
        .collect()
}

pub(crate) fn get(vars: &VarMap, name: &str) -> Result<Var> {
    vars.get(name).copied().ok_or_else(|| contract(format!("missing parameter {}", name)))
}

/// One-hot rows for `labels` over `n` classes.
pub fn one_hot<T: Element>(labels: &[usize], n: usize) -> Result<Tensor<T>> {
    if let Some(bad) = labels.iter().find(|&&l| l >= n) {
        return Err(contract(format!("label {} outside {} classes", bad, n)));
    }
    Ok(Tensor::from_fn(&[labels.len(), n], |i| {
        if labels[i / n] == i % n {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// Default conv/dense initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub(crate) fn uniform_init<T: Element, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
}

pub(crate) fn resnet_block<T: Element>(
    g: &mut Graph<T>,
    vars: &VarMap,
    prefix: &str,
    x: Var,
    fin: usize,
    fout: usize,
    mut after_conv: impl FnMut(&mut Graph<T>, usize, Var) -> Result<Var>,
) -> Result<Var> {
    use crate::tensor::ConvConfig;
    let shortcut = if fin != fout {
        let w = get(vars, &format!("{}.short.w", prefix))?;
        g.conv2d(x, w, None, ConvConfig::same(1, 1))?
    } else {
        x
    };
    let a = g.leaky_relu(x, LEAKY_SLOPE)?;
    let w0 = get(vars, &format!("{}.conv0.w", prefix))?;
    let b0 = get(vars, &format!("{}.conv0.b", prefix))?;
    let h = g.conv2d(a, w0, Some(b0), ConvConfig::same(1, 3))?;
    let h = after_conv(g, 0, h)?;
    let a = g.leaky_relu(h, LEAKY_SLOPE)?;
    let w1 = get(vars, &format!("{}.conv1.w", prefix))?;
    let b1 = get(vars, &format!("{}.conv1.b", prefix))?;
    let h = g.conv2d(a, w1, Some(b1), ConvConfig::same(1, 3))?;
    let h = after_conv(g, 1, h)?;
    let h = g.scale(h, RESIDUAL_SCALE);
    g.add(shortcut, h)
}

pub(crate) fn init_block<T: Element, R: Rng>(
    params: &mut ParamMap<T>,
    prefix: &str,
    fin: usize,
    fout: usize,
    rng: &mut R,
) {
    let hidden = fin.min(fout);
    params.insert(format!("{}.conv0.w", prefix), uniform_init(&[hidden, fin, 3, 3], fin * 9, rng));
    params.insert(format!("{}.conv0.b", prefix), uniform_init(&[hidden], fin * 9, rng));
    params.insert(format!("{}.conv1.w", prefix), uniform_init(&[fout, hidden, 3, 3], hidden * 9, rng));
    params.insert(format!("{}.conv1.b", prefix), uniform_init(&[fout], hidden * 9, rng));
    if fin != fout {
        params.insert(format!("{}.short.w", prefix), uniform_init(&[fout, fin, 1, 1], fin, rng));
    }
}
