use crate::error::{contract, Result};
use crate::tensor::{Element, Graph, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Generator minimizes `softplus(-D(G(z)))`.
    #[default]
    NonSaturating,
    /// Generator minimizes `-softplus(D(G(z)))`, i.e. `log(1 - sigmoid(D))`.
    Minimax,
}

/// Discriminator loss on logits.
pub fn discriminator_loss<T: Element>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<Var> {
    let nr = g.scale(real, -1.0);
    let sr = g.softplus(nr);
    let lr = g.mean(sr);
    let sf = g.softplus(fake);
    let lf = g.mean(sf);
    g.add(lr, lf)
}

/// Generator loss on fake logits.
pub fn generator_loss<T: Element>(g: &mut Graph<T>, fake: Var, variant: LossVariant) -> Var {
    match variant {
        LossVariant::NonSaturating => {
            let n = g.scale(fake, -1.0);
            let s = g.softplus(n);
            g.mean(s)
        }
        LossVariant::Minimax => {
            let s = g.softplus(fake);
            let m = g.mean(s);
            g.scale(m, -1.0)
        }
    }
}

/// `(loss_D, loss_G)` from real and fake logits.
pub fn gan_losses<T: Element>(
    g: &mut Graph<T>,
    real: Var,
    fake: Var,
    variant: LossVariant,
) -> Result<(Var, Var)> {
    if g.shape(real) != g.shape(fake) {
        return Err(contract(format!(
            "real logits {:?} and fake logits {:?} differ in shape",
            g.shape(real),
            g.shape(fake)
        )));
    }
    let d = discriminator_loss(g, real, fake)?;
    let gl = generator_loss(g, fake, variant);
    Ok((d, gl))
}

/// `(gamma / 2) * mean_b |dD(x_b)/dx_b|^2`, differentiable w.r.t. the
/// discriminator parameters. `x` must be a leaf that requires grad and
/// `logits` the discriminator output `[B]` on it.
pub fn r1_penalty<T: Element>(g: &mut Graph<T>, x: Var, logits: Var, gamma: f64) -> Result<Var> {
    if !g.requires_grad(x) {
        return Err(contract("R1 input must require grad"));
    }
    let b = g.shape(x).first().copied().unwrap_or(1).max(1);
    let total = g.sum(logits);
    let grads = g.grad(total, &[x], true)?;
    let Some(dx) = grads[0] else {
        return Ok(g.constant(crate::tensor::Tensor::scalar(T::zero())));
    };
    let sq = g.square(dx);
    let s = g.sum(sq);
    Ok(g.scale(s, gamma / (2.0 * b as f64)))
}
