use super::loss::{discriminator_loss, generator_loss};
use super::{
    bind_params, discriminator_forward, generator_forward, r1_penalty, DiscriminatorSpec, GeneratorSpec,
    LossVariant, ParamMap, TaskParams,
};
use crate::adapters::AdapterConfig;
use crate::error::{config, contract, Error, Result};
use crate::tensor::{Adam, AdamConfig, Element, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// R1 weight.
    pub gamma: f64,
    pub g_opt: AdamConfig,
    pub d_opt: AdamConfig,
    pub batch: usize,
    pub iterations: usize,
    #[serde(default)]
    pub loss: LossVariant,
    /// Re-initialize the discriminator at the start of every adapter task.
    #[serde(default)]
    pub reinit_discriminator: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 10.0,
            g_opt: AdamConfig::default(),
            d_opt: AdamConfig::default(),
            batch: 16,
            iterations: 3000,
            loss: LossVariant::NonSaturating,
            reinit_discriminator: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.gamma > 0.0) {
            errs.push(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.iterations == 0 {
            errs.push("iterations must be positive".to_string());
        }
        if self.batch == 0 {
            errs.push("batch must be positive".to_string());
        }
        for (what, c) in [("g_opt", &self.g_opt), ("d_opt", &self.d_opt)] {
            if let Err(e) = c.validate() {
                errs.push(format!("{}: {}", what, e));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(config(errs.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss_d: f64,
    pub loss_g: f64,
    pub r1: f64,
}

/// Which parameter groups receive updates.
#[derive(Debug, Clone, Default)]
pub struct FreezeMask {
    /// Frozen global parameter names.
    pub theta: BTreeSet<String>,
    pub phi: bool,
    pub psi: bool,
}

impl FreezeMask {
    pub fn all_theta(theta: &ParamMap<impl Element>) -> FreezeMask {
        FreezeMask { theta: theta.keys().cloned().collect(), phi: false, psi: false }
    }
}

/// Optimizer state and noise source for alternating GAN updates.
#[derive(Debug, Clone)]
pub struct GanTrainer {
    pub gen: GeneratorSpec,
    pub disc: DiscriminatorSpec,
    pub adapters: AdapterConfig,
    pub cfg: TrainConfig,
    opt_g: Adam,
    opt_d: Adam,
    rng: ChaCha8Rng,
    iteration: u64,
}

impl GanTrainer {
    pub fn new(gen: GeneratorSpec, adapters: AdapterConfig, cfg: TrainConfig, seed: u64) -> Result<Self> {
        gen.validate()?;
        adapters.validate()?;
        cfg.validate()?;
        let disc = DiscriminatorSpec::mirror(&gen);
        Ok(GanTrainer {
            opt_g: Adam::new(cfg.g_opt)?,
            opt_d: Adam::new(cfg.d_opt)?,
            gen,
            disc,
            adapters,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Clears generator moments, for a new set of task parameters.
    pub fn reset_generator_optimizer(&mut self) {
        self.opt_g.reset();
    }

    pub fn reset_discriminator_optimizer(&mut self) {
        self.opt_d.reset();
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn sample_latent<T: Element>(&mut self, b: usize) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(&[b, self.gen.latent_dim], |_| {
            let v: f64 = StandardNormal.sample(rng);
            T::from_f64(v)
        })
    }

    fn sample_labels(&mut self, b: usize) -> Vec<usize> {
        let n = self.gen.n_labels;
        (0..b).map(|_| if n > 1 { self.rng.gen_range(0..n) } else { 0 }).collect()
    }

    /// One discriminator update on `loss_D + R1` followed by one generator
    /// update on `loss_G`. Real samples are drawn with replacement from
    /// `images` (`[N, C, H, W]`, labels aligned).
    #[allow(clippy::too_many_arguments)]
    pub fn step<T: Element>(
        &mut self,
        theta: &mut ParamMap<T>,
        phi: Option<&mut TaskParams<Tensor<T>>>,
        psi: &mut ParamMap<T>,
        mask: &FreezeMask,
        images: &Tensor<T>,
        labels: &[usize],
    ) -> Result<StepStats> {
        let n = images.shape().first().copied().unwrap_or(0);
        if n == 0 || labels.len() != n {
            return Err(contract(format!("{} images with {} labels", n, labels.len())));
        }
        let it = self.iteration;
        let b = self.cfg.batch;
        let numeric = |what: &str, v: f64| -> Result<()> {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::Numeric { location: format!("iteration {}", it), detail: format!("{} = {}", what, v) })
            }
        };
        let tag = |e: Error| match e {
            Error::Numeric { location, detail } => {
                Error::Numeric { location: format!("iteration {}, {}", it, location), detail }
            }
            other => other,
        };

        let idx: Vec<usize> = (0..b).map(|_| self.rng.gen_range(0..n)).collect();
        let real = images.select_rows(&idx)?;
        let real_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let z = self.sample_latent::<T>(b);
        let fake_labels = self.sample_labels(b);
        let phi_ref = phi.as_deref();

        // Discriminator.
        let mut g = Graph::<T>::new();
        let tv = bind_params(&mut g, theta, |_| false);
        let pv = phi_ref.map(|p| p.map(|t| g.leaf(t.clone(), false)));
        let dv = bind_params(&mut g, psi, |_| !mask.psi);
        let zv = g.constant(z);
        let fl = self.gen.conditional.then_some(fake_labels.as_slice());
        let fake = generator_forward(&mut g, &self.gen, &self.adapters, &tv, pv.as_ref(), zv, fl)?;
        let fake = g.constant(g.value(fake).clone());
        let xr = g.leaf(real, true);
        let rl = self.gen.conditional.then_some(real_labels.as_slice());
        let d_real = discriminator_forward(&mut g, &self.disc, &dv, xr, rl)?;
        let d_fake = discriminator_forward(&mut g, &self.disc, &dv, fake, fl)?;
        let loss_d = discriminator_loss(&mut g, d_real, d_fake)?;
        let r1 = r1_penalty(&mut g, xr, d_real, self.cfg.gamma).map_err(tag)?;
        let loss_d_v = g.value(loss_d).item().as_f64();
        let r1_v = g.value(r1).item().as_f64();
        numeric("loss_D", loss_d_v)?;
        numeric("R1", r1_v)?;
        if !mask.psi {
            let total = g.add(loss_d, r1)?;
            let (names, vars): (Vec<String>, Vec<Var>) = dv.iter().map(|(k, v)| (k.clone(), *v)).unzip();
            let grads = g.grad(total, &vars, false).map_err(tag)?;
            for (name, gv) in names.iter().zip(grads) {
                if let Some(gv) = gv {
                    let gt = g.value(gv).clone();
                    let p = psi.get_mut(name).expect("bound from psi");
                    self.opt_d.step_one(name, p, &gt)?;
                }
            }
        }

        // Generator.
        let z = self.sample_latent::<T>(b);
        let fake_labels = self.sample_labels(b);
        let mut g = Graph::<T>::new();
        let tv = bind_params(&mut g, theta, |name| !mask.theta.contains(name));
        let train_phi = !mask.phi;
        let pv = phi_ref.map(|p| p.map(|t| g.leaf(t.clone(), train_phi)));
        let dv = bind_params(&mut g, psi, |_| false);
        let zv = g.constant(z);
        let fl = self.gen.conditional.then_some(fake_labels.as_slice());
        let fake = generator_forward(&mut g, &self.gen, &self.adapters, &tv, pv.as_ref(), zv, fl)?;
        let d_fake = discriminator_forward(&mut g, &self.disc, &dv, fake, fl)?;
        let loss_g = generator_loss(&mut g, d_fake, self.cfg.loss);
        let loss_g_v = g.value(loss_g).item().as_f64();
        numeric("loss_G", loss_g_v)?;

        let mut targets: Vec<(String, Var)> = tv
            .iter()
            .filter(|(k, _)| !mask.theta.contains(*k))
            .map(|(k, v)| (format!("theta/{}", k), *v))
            .collect();
        if let (Some(pv), true) = (&pv, train_phi) {
            targets.extend(pv.entries().into_iter().map(|(k, v)| (format!("phi/{}", k), *v)));
        }
        if !targets.is_empty() {
            let vars: Vec<Var> = targets.iter().map(|(_, v)| *v).collect();
            let grads = g.grad(loss_g, &vars, false).map_err(tag)?;
            let grad_of: std::collections::BTreeMap<&str, Tensor<T>> = targets
                .iter()
                .zip(grads)
                .filter_map(|((k, _), gv)| gv.map(|gv| (k.as_str(), g.value(gv).clone())))
                .collect();
            for (name, p) in theta.iter_mut() {
                if let Some(gt) = grad_of.get(format!("theta/{}", name).as_str()) {
                    self.opt_g.step_one(&format!("theta/{}", name), p, gt)?;
                }
            }
            if let Some(phi) = phi {
                for (name, p) in phi.entries_mut() {
                    let key = format!("phi/{}", name);
                    if let Some(gt) = grad_of.get(key.as_str()) {
                        self.opt_g.step_one(&key, p, gt)?;
                    }
                }
            }
        }
        self.iteration += 1;
        Ok(StepStats { loss_d: loss_d_v, loss_g: loss_g_v, r1: r1_v })
    }
}
