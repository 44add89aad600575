//! Task sequencing over a frozen global generator.
//!
//! Task 0 trains θ, φ^0 and ψ together. Afterwards θ is frozen and every
//! new task gets fresh adapters φ^t; earlier φ are never touched again, so a
//! finished task regenerates bit-identical samples for the rest of the run.

use crate::adapters::AdapterConfig;
use crate::error::{contract, Error, Result};
use crate::gan::{
    bind_params, generator_forward, FreezeMask, GanTrainer, GeneratorSpec, ParamMap, StepStats, TaskParams,
    TrainConfig,
};
use crate::tensor::{Element, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};

/// Fixed-noise samples per task kept for forgetting checks.
pub const SNAPSHOT_SAMPLES: usize = 64;

/// Training data and budget of one task.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub id: usize,
    /// `[N, C, H, W]` in `[-1, 1]`.
    pub images: Tensor<f32>,
    /// Task-local labels, all 0 for unconditional tasks.
    pub labels: Vec<usize>,
    pub iterations: usize,
}

/// Pixels generated from a fixed noise batch right after a task finished.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub noise_seed: u64,
    pub labels: Vec<usize>,
    pub pixels: Tensor<f32>,
}

#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    pub theta: ParamMap<f32>,
    pub phi: BTreeMap<usize, TaskParams<Tensor<f32>>>,
    pub psi: ParamMap<f32>,
    /// Frozen θ names.
    pub frozen: BTreeSet<String>,
    pub snapshots: BTreeMap<usize, Snapshot>,
}

/// SHA-256 over names, shapes and little-endian payloads, in name order.
pub fn hash_params<'a, T: Element>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> String {
    let mut sorted: Vec<(&str, &Tensor<T>)> = entries.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let mut h = Sha256::new();
    for (name, t) in sorted {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        h.update(t.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{:02x}", b)).collect()
}

impl ParameterStore {
    pub fn theta_hash(&self) -> String {
        hash_params(self.theta.iter().map(|(k, v)| (k.as_str(), v)))
    }

    pub fn phi_hash(&self, task: usize) -> Result<String> {
        let p = self.phi.get(&task).ok_or_else(|| Error::NotFound(format!("task {}", task)))?;
        let named = p.to_named();
        Ok(hash_params(named.iter().map(|(k, v)| (k.as_str(), v))))
    }

    pub fn theta_fully_frozen(&self) -> bool {
        self.theta.keys().all(|k| self.frozen.contains(k))
    }
}

/// `lambda * a + (1 - lambda) * b` over every tensor. Endpoints and equal
/// entries are returned exactly.
pub fn interpolate_params<T: Element>(
    a: &TaskParams<Tensor<T>>,
    b: &TaskParams<Tensor<T>>,
    lambda: f64,
) -> Result<TaskParams<Tensor<T>>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(crate::error::config(format!("lambda {} outside [0, 1]", lambda)));
    }
    let (ea, eb) = (a.entries(), b.entries());
    if ea.len() != eb.len() || ea.iter().zip(&eb).any(|((na, ta), (nb, tb))| na != nb || ta.shape() != tb.shape()) {
        return Err(contract("interpolation needs identical parameter names and shapes"));
    }
    let l = T::from_f64(lambda);
    let mut out = a.clone();
    for ((_, o), (_, tb)) in out.entries_mut().into_iter().zip(eb) {
        for (x, &y) in o.data_mut().iter_mut().zip(tb.data()) {
            *x = if lambda == 1.0 || x.to_bits_eq(y) {
                *x
            } else if lambda == 0.0 {
                y
            } else {
                y + l * (*x - y)
            };
        }
    }
    Ok(out)
}

trait BitsEq {
    fn to_bits_eq(&self, other: Self) -> bool;
}

impl<T: Element> BitsEq for T {
    fn to_bits_eq(&self, other: T) -> bool {
        let (a, b) = (self.as_f64(), other.as_f64());
        a.to_bits() == b.to_bits()
    }
}

/// Standard normal latents `[n, latent]` from `seed`.
pub fn latent_noise(n: usize, latent: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, latent], |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v as f32
    })
}

/// Runs the generator without recording gradients.
pub fn render(
    spec: &GeneratorSpec,
    acfg: &AdapterConfig,
    theta: &ParamMap<f32>,
    phi: Option<&TaskParams<Tensor<f32>>>,
    z: &Tensor<f32>,
    labels: Option<&[usize]>,
) -> Result<Tensor<f32>> {
    let n = z.shape()[0];
    let r = spec.resolution();
    if n == 0 {
        return Ok(Tensor::zeros(&[0, spec.img_channels, r, r]));
    }
    let mut g = Graph::<f32>::new();
    let tv = bind_params(&mut g, theta, |_| false);
    let pv = phi.map(|p| p.map(|t| g.leaf(t.clone(), false)));
    let zv = g.constant(z.clone());
    let out = generator_forward(&mut g, spec, acfg, &tv, pv.as_ref(), zv, labels)?;
    Ok(g.value(out).clone())
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut x = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 31;
    x.wrapping_mul(0xBF58_476D_1CE4_E5B9) ^ (x >> 29)
}

/// Per-iteration losses of one task.
pub type LossLog = Vec<StepStats>;

/// Owns the parameter store and optimizer state across a task sequence.
pub struct ContinualLearner {
    pub store: ParameterStore,
    pub trainer: GanTrainer,
    pub seed: u64,
}

impl ContinualLearner {
    pub fn new(gen: GeneratorSpec, adapters: AdapterConfig, cfg: TrainConfig, seed: u64) -> Result<Self> {
        let trainer = GanTrainer::new(gen, adapters, cfg, seed)?;
        Ok(ContinualLearner { store: ParameterStore::default(), trainer, seed })
    }

    pub fn gen(&self) -> &GeneratorSpec {
        &self.trainer.gen
    }

    pub fn adapters(&self) -> &AdapterConfig {
        &self.trainer.adapters
    }

    fn labels_for(&self, n: usize) -> Option<Vec<usize>> {
        let g = self.gen();
        g.conditional.then(|| (0..n).map(|i| i % g.n_labels).collect())
    }

    fn check_task(&self, task: &TaskSpec) -> Result<()> {
        let r = self.gen().resolution();
        let want = [self.gen().img_channels, r, r];
        let s = task.images.shape();
        if s.len() != 4 || s[1..] != want || s[0] == 0 {
            return Err(contract(format!("task {} images {:?}, expected [N, {:?}]", task.id, s, want)));
        }
        if task.labels.len() != s[0] || task.labels.iter().any(|&l| l >= self.gen().n_labels) {
            return Err(contract(format!("task {} labels do not match its images", task.id)));
        }
        Ok(())
    }

    fn run(
        &mut self,
        task: &TaskSpec,
        mask: &FreezeMask,
        log: &mut dyn FnMut(usize, &StepStats),
    ) -> Result<LossLog> {
        self.trainer.reseed(mix(self.seed, task.id as u64 + 1));
        let mut out = Vec::with_capacity(task.iterations);
        let store = &mut self.store;
        for it in 0..task.iterations {
            let phi = store.phi.get_mut(&task.id);
            let s = self.trainer.step(&mut store.theta, phi, &mut store.psi, mask, &task.images, &task.labels)?;
            log(it, &s);
            out.push(s);
        }
        Ok(out)
    }

    /// Trains θ, φ^0 and ψ jointly on the first task, then freezes θ and
    /// records the task snapshot.
    pub fn train_base(&mut self, task: &TaskSpec, log: &mut dyn FnMut(usize, &StepStats)) -> Result<LossLog> {
        if !self.store.theta.is_empty() || !self.store.phi.is_empty() {
            return Err(contract("base training needs an empty store"));
        }
        if task.id != 0 {
            return Err(contract("the base task must have id 0"));
        }
        self.check_task(task)?;
        let acfg = self.adapters().clone();
        self.store.theta = self.gen().init_theta(&acfg, mix(self.seed, 0x7E7A))?;
        self.store.psi = self.trainer.disc.init_psi(mix(self.seed, 0xD15C));
        if acfg.enabled {
            let phi = self.gen().init_task(&acfg, mix(self.seed, 0xF1))?;
            self.store.phi.insert(0, phi);
        }
        let losses = self.run(task, &FreezeMask::default(), log)?;
        self.store.frozen = self.store.theta.keys().cloned().collect();
        self.capture_snapshot(0)?;
        Ok(losses)
    }

    /// Fresh adapters for task `t`; θ and every earlier φ stay untouched.
    pub fn train_task(&mut self, task: &TaskSpec, log: &mut dyn FnMut(usize, &StepStats)) -> Result<LossLog> {
        self.begin_task(task)?;
        self.train_begun(task, log)
    }

    /// Initializes φ^t without training, so the pre-adaptation generator can
    /// be inspected before [`ContinualLearner::train_begun`].
    pub fn begin_task(&mut self, task: &TaskSpec) -> Result<()> {
        if task.id == 0 {
            return Err(contract("task 0 is trained by train_base"));
        }
        if self.store.theta.is_empty() || !self.store.theta_fully_frozen() {
            return Err(contract("adapter tasks need a frozen base"));
        }
        if self.store.phi.contains_key(&task.id) {
            return Err(contract(format!("task {} was already trained", task.id)));
        }
        if task.id != self.store.phi.keys().next_back().map_or(1, |k| k + 1) {
            return Err(contract(format!("task ids must be consecutive, got {}", task.id)));
        }
        if !self.adapters().enabled {
            return Err(contract("adapters are disabled"));
        }
        self.check_task(task)?;
        let acfg = self.adapters().clone();
        let phi = self.gen().init_task(&acfg, mix(self.seed, 0xF1 + task.id as u64))?;
        self.store.phi.insert(task.id, phi);
        self.trainer.reset_generator_optimizer();
        if self.trainer.cfg.reinit_discriminator {
            self.store.psi = self.trainer.disc.init_psi(mix(self.seed, 0xD15C + task.id as u64));
            self.trainer.reset_discriminator_optimizer();
        }
        Ok(())
    }

    pub fn train_begun(&mut self, task: &TaskSpec, log: &mut dyn FnMut(usize, &StepStats)) -> Result<LossLog> {
        if !self.store.phi.contains_key(&task.id) || self.store.snapshots.contains_key(&task.id) {
            return Err(contract(format!("task {} is not awaiting training", task.id)));
        }
        let mask = FreezeMask { theta: self.store.frozen.clone(), phi: false, psi: false };
        let losses = self.run(task, &mask, log)?;
        self.capture_snapshot(task.id)?;
        Ok(losses)
    }

    fn snapshot_seed(&self, task: usize) -> u64 {
        mix(self.seed, 0x5A5A_0000 + task as u64)
    }

    fn capture_snapshot(&mut self, task: usize) -> Result<()> {
        let noise_seed = self.snapshot_seed(task);
        let labels = self.labels_for(SNAPSHOT_SAMPLES).unwrap_or_else(|| vec![0; SNAPSHOT_SAMPLES]);
        let pixels = self.generate(task, SNAPSHOT_SAMPLES, Some(&labels), noise_seed)?;
        self.store.snapshots.insert(task, Snapshot { noise_seed, labels, pixels });
        Ok(())
    }

    /// `n` samples of task `task` from latent seed `seed`. Labels default to
    /// cycling through the label set.
    pub fn generate(&self, task: usize, n: usize, labels: Option<&[usize]>, seed: u64) -> Result<Tensor<f32>> {
        let phi = if self.adapters().enabled {
            Some(self.store.phi.get(&task).ok_or_else(|| Error::NotFound(format!("task {}", task)))?)
        } else if task == 0 && !self.store.theta.is_empty() {
            None
        } else {
            return Err(Error::NotFound(format!("task {}", task)));
        };
        self.generate_with(phi, n, labels, seed)
    }

    /// Like [`ContinualLearner::generate`] with explicit task parameters.
    pub fn generate_with(
        &self,
        phi: Option<&TaskParams<Tensor<f32>>>,
        n: usize,
        labels: Option<&[usize]>,
        seed: u64,
    ) -> Result<Tensor<f32>> {
        let default_labels = self.labels_for(n);
        let labels = labels.or(default_labels.as_deref());
        let z = latent_noise(n, self.gen().latent_dim, seed);
        render(self.gen(), self.adapters(), &self.store.theta, phi, &z, labels)
    }

    /// Re-attaches snapshot pixels saved by an earlier run of the same
    /// configuration and seed.
    pub fn restore_snapshot(&mut self, task: usize, pixels: Tensor<f32>) -> Result<()> {
        let noise_seed = self.snapshot_seed(task);
        let labels = self.labels_for(SNAPSHOT_SAMPLES).unwrap_or_else(|| vec![0; SNAPSHOT_SAMPLES]);
        if pixels.shape().first() != Some(&labels.len()) {
            return Err(contract(format!("snapshot of task {} has shape {:?}", task, pixels.shape())));
        }
        self.store.snapshots.insert(task, Snapshot { noise_seed, labels, pixels });
        Ok(())
    }

    /// True iff task `task` still regenerates its snapshot bit for bit.
    pub fn verify_no_forgetting(&self, task: usize) -> Result<bool> {
        let snap = self
            .store
            .snapshots
            .get(&task)
            .ok_or_else(|| Error::NotFound(format!("snapshot of task {}", task)))?;
        let now = self.generate(task, snap.labels.len(), Some(&snap.labels), snap.noise_seed)?;
        Ok(now.shape() == snap.pixels.shape()
            && now.data().iter().zip(snap.pixels.data()).all(|(a, b)| a.to_bits() == b.to_bits()))
    }
}
