//! Command implementations. Every command writes into one experiment
//! directory and refreshes its manifest.

use crate::checkpoint::{self, Checkpoint, StoredTensor};
use crate::config::ExperimentConfig;
use crate::ppm;
use cagn_core::continual::{interpolate_params, ContinualLearner, LossLog, TaskSpec};
use cagn_core::costing::{model_cost, reference_check};
use cagn_core::data::{synth, Family};
use cagn_core::gan::TaskParams;
use cagn_core::metrics::{proxy_fid, FeatureExtractor};
use cagn_core::replay::{curves_csv, replay_experiment};
use cagn_core::{Error, Result, Tensor};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

const SNAPSHOT_KEY: &str = "snapshot.pixels";

/// Resolved run context.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    /// Directory relative paths in the config resolve against.
    pub base_dir: PathBuf,
    pub seed: u64,
    pub deterministic: bool,
    pub threads: usize,
}

impl Ctx {
    pub fn new(cfg: ExperimentConfig, base_dir: PathBuf, out: Option<PathBuf>, seed: Option<u64>) -> Result<Ctx> {
        let out = out
            .or_else(|| cfg.out.as_ref().map(|o| base_dir.join(o)))
            .ok_or_else(|| Error::Config("no output directory: pass --out or set out in the config".into()))?;
        let seed = seed.unwrap_or(cfg.seed);
        Ok(Ctx { cfg, out, base_dir, seed, deterministic: false, threads: 1 })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn learner(&self) -> Result<ContinualLearner> {
        ContinualLearner::new(self.cfg.generator.clone(), self.cfg.adapters.clone(), self.cfg.train.clone(), self.seed)
    }

    fn task_spec(&self, t: usize) -> Result<TaskSpec> {
        let (train, _) = self.cfg.task_data(t, &self.base_dir)?;
        Ok(TaskSpec { id: t, images: train.images, labels: train.labels, iterations: self.cfg.iterations(t) })
    }

    fn phi_path(&self, t: usize) -> PathBuf {
        self.path(&format!("phi_{}.ckpt", t))
    }

    /// Learner state from the experiment directory: θ, ψ and every φ^t
    /// present for consecutive `t` from 0.
    pub fn load_learner(&self) -> Result<ContinualLearner> {
        let mut l = self.learner()?;
        l.store.theta = checkpoint::to_f32(&checkpoint::load(&self.path("theta.ckpt"))?)?;
        l.store.psi = checkpoint::to_f32(&checkpoint::load(&self.path("psi.ckpt"))?)?;
        l.store.frozen = l.store.theta.keys().cloned().collect();
        if self.cfg.adapters.enabled {
            let mut t = 0;
            while self.phi_path(t).exists() {
                let mut named = checkpoint::to_f32(&checkpoint::load(&self.phi_path(t))?)?;
                let snap = named.remove(SNAPSHOT_KEY);
                l.store.phi.insert(t, TaskParams::from_named(&named)?);
                if let Some(px) = snap {
                    l.restore_snapshot(t, px)?;
                }
                t += 1;
            }
        }
        Ok(l)
    }

    fn save_state(&self, l: &ContinualLearner, task: usize) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        checkpoint::save(&self.path("theta.ckpt"), &checkpoint::from_f32(&l.store.theta))?;
        checkpoint::save(&self.path("psi.ckpt"), &checkpoint::from_f32(&l.store.psi))?;
        if let Some(phi) = l.store.phi.get(&task) {
            let mut ck: Checkpoint = checkpoint::from_f32(&phi.to_named());
            if let Some(s) = l.store.snapshots.get(&task) {
                ck.insert(SNAPSHOT_KEY.into(), StoredTensor::F32(s.pixels.clone()));
            }
            checkpoint::save(&self.phi_path(task), &ck)?;
        }
        Ok(())
    }
}

fn write_losses(path: &Path, log: &LossLog) -> Result<()> {
    let mut s = String::from("iteration,loss_d,loss_g,r1\n");
    for (i, st) in log.iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{}", i, st.loss_d, st.loss_g, st.r1);
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Output of a training command.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub task: usize,
    pub iterations: usize,
    pub proxy_fid: f64,
}

fn finish_task(ctx: &Ctx, l: &ContinualLearner, task: usize, log: &LossLog) -> Result<TrainSummary> {
    ctx.save_state(l, task)?;
    write_losses(&ctx.path(&format!("losses_{}.csv", task)), log)?;
    let rows = fid_rows(ctx, l, &[task])?;
    let mut s = String::from("task,proxy_fid,real_split_fid\n");
    for r in &rows {
        let _ = writeln!(s, "{},{},{}", r.0, r.1, r.2);
    }
    std::fs::write(ctx.path(&format!("fid_{}.csv", task)), s)?;
    write_cost(ctx)?;
    write_manifest(ctx)?;
    Ok(TrainSummary { task, iterations: log.len(), proxy_fid: rows[0].1 })
}

pub fn train_base(ctx: &Ctx) -> Result<TrainSummary> {
    let mut l = ctx.learner()?;
    let task = ctx.task_spec(0)?;
    let log = l.train_base(&task, &mut |_, _| {})?;
    finish_task(ctx, &l, 0, &log)
}

pub fn train_task(ctx: &Ctx, t: usize) -> Result<TrainSummary> {
    if t == 0 {
        return Err(Error::Contract("task 0 is trained by train-base".into()));
    }
    if t >= ctx.cfg.tasks.len() {
        return Err(Error::NotFound(format!("task {} (config has {} tasks)", t, ctx.cfg.tasks.len())));
    }
    let mut l = ctx.load_learner()?;
    if !l.store.phi.contains_key(&(t - 1)) {
        return Err(Error::NotFound(format!("checkpoint of task {}", t - 1)));
    }
    let task = ctx.task_spec(t)?;
    let log = l.train_task(&task, &mut |_, _| {})?;
    finish_task(ctx, &l, t, &log)
}

fn sample_labels(ctx: &Ctx, n: usize) -> Option<Vec<usize>> {
    let g = &ctx.cfg.generator;
    g.conditional.then(|| (0..n).map(|i| i % g.n_labels).collect())
}

fn render(ctx: &Ctx, l: &ContinualLearner, task: usize, n: usize, seed: u64) -> Result<Tensor<f32>> {
    let labels = sample_labels(ctx, n);
    l.generate(task, n, labels.as_deref(), seed)
}

/// Writes `n` images named `{task}_{seed}_{index}.ppm` into `dest`.
pub fn generate(ctx: &Ctx, task: usize, n: usize, seed: u64, dest: &Path) -> Result<Vec<PathBuf>> {
    let l = ctx.load_learner()?;
    let imgs = render(ctx, &l, task, n, seed)?;
    std::fs::create_dir_all(dest)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let p = dest.join(format!("{}_{}_{}.ppm", task, seed, i));
        ppm::write(&p, &imgs, i)?;
        out.push(p);
    }
    write_manifest(ctx)?;
    Ok(out)
}

/// The eleven-point grid 0.0, 0.1, ..., 1.0.
pub fn default_lambdas() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Sample sheet with one row per λ (φ = λ φ^i + (1 - λ) φ^j) and one
/// column per fixed latent. Returns the sheet path.
pub fn interpolate(ctx: &Ctx, ti: usize, tj: usize, lambdas: &[f64], n: usize, seed: u64) -> Result<PathBuf> {
    if lambdas.is_empty() {
        return Err(Error::Config("empty lambda grid".into()));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::Config(format!("lambda {} outside [0, 1]", bad)));
    }
    let l = ctx.load_learner()?;
    let get = |t: usize| l.store.phi.get(&t).ok_or_else(|| Error::NotFound(format!("task {}", t)));
    let (pi, pj) = (get(ti)?, get(tj)?);
    let labels = sample_labels(ctx, n);
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lam in lambdas {
        let phi = interpolate_params(pi, pj, lam)?;
        rows.push(l.generate_with(Some(&phi), n, labels.as_deref(), seed)?);
    }
    let sheet = ppm::sheet(&rows)?;
    std::fs::create_dir_all(&ctx.out)?;
    let p = ctx.path(&format!("interp_{}_{}_{}.ppm", ti, tj, seed));
    ppm::write(&p, &sheet, 0)?;
    write_manifest(ctx)?;
    Ok(p)
}

/// `(task, proxy_fid, real_split_fid)` per task.
fn fid_rows(ctx: &Ctx, l: &ContinualLearner, tasks: &[usize]) -> Result<Vec<(usize, f64, f64)>> {
    let ex = FeatureExtractor::new(ctx.cfg.eval.feature_seed, ctx.cfg.generator.img_channels);
    let one = |t: usize| -> Result<(usize, f64, f64)> {
        let (train, held) = ctx.cfg.task_data(t, &ctx.base_dir)?;
        let fake = render(ctx, l, t, ctx.cfg.eval.samples, ctx.cfg.eval.noise_seed)?;
        Ok((t, proxy_fid(&ex, &fake, &held.images)?, proxy_fid(&ex, &train.images, &held.images)?))
    };
    if ctx.deterministic || ctx.threads <= 1 || tasks.len() <= 1 {
        return tasks.iter().map(|&t| one(t)).collect();
    }
    // Tasks are independent; chunks keep at most `threads` workers alive.
    let mut out = Vec::with_capacity(tasks.len());
    for chunk in tasks.chunks(ctx.threads) {
        let res: Vec<Result<(usize, f64, f64)>> = std::thread::scope(|s| {
            let hs: Vec<_> = chunk.iter().map(|&t| s.spawn(move || one(t))).collect();
            hs.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
        });
        for r in res {
            out.push(r?);
        }
    }
    Ok(out)
}

/// Proxy-FID of every trained task against its held-out images.
pub fn eval(ctx: &Ctx) -> Result<PathBuf> {
    let l = ctx.load_learner()?;
    let tasks: Vec<usize> = if ctx.cfg.adapters.enabled { l.store.phi.keys().copied().collect() } else { vec![0] };
    let last = *tasks.last().ok_or_else(|| Error::NotFound("trained tasks".into()))?;
    let rows = fid_rows(ctx, &l, &tasks)?;
    // Earlier φ never change, so each row holds after every later task.
    let mut s = String::from("trained_through,task,proxy_fid,real_split_fid\n");
    for (t, f, r) in rows {
        let _ = writeln!(s, "{},{},{},{}", last, t, f, r);
    }
    let p = ctx.path("fid_matrix.csv");
    std::fs::create_dir_all(&ctx.out)?;
    std::fs::write(&p, s)?;
    write_manifest(ctx)?;
    Ok(p)
}

fn write_cost(ctx: &Ctx) -> Result<String> {
    let r = model_cost(&ctx.cfg.generator, &ctx.cfg.adapters)?;
    std::fs::create_dir_all(&ctx.out)?;
    std::fs::write(ctx.path("cost.csv"), r.to_csv())?;
    let mut table = r.to_table();
    let _ = writeln!(table, "\nFLOPs are counted as multiply-accumulates.");
    let _ = writeln!(table, "{}", reference_check().note);
    std::fs::write(ctx.path("cost.txt"), &table)?;
    Ok(table)
}

pub fn cost(ctx: &Ctx) -> Result<String> {
    let t = write_cost(ctx)?;
    write_manifest(ctx)?;
    Ok(t)
}

pub fn replay(ctx: &Ctx) -> Result<PathBuf> {
    let o = replay_experiment(&ctx.cfg.generator, &ctx.cfg.adapters, &ctx.cfg.train, &ctx.cfg.replay, ctx.seed)?;
    let n = ctx.cfg.replay.n;
    for c in [&o.replay, &o.no_replay] {
        if !c.audit.matches_schedule(n, c.mode) {
            return Err(Error::Contract(format!("{} batches broke the t x n schedule", c.mode.as_str())));
        }
    }
    std::fs::create_dir_all(&ctx.out)?;
    let p = ctx.path("replay.csv");
    std::fs::write(&p, curves_csv(&[o.replay, o.no_replay]))?;
    write_manifest(ctx)?;
    Ok(p)
}

/// Writes `{family}_{index}.ppm` and `labels.txt` into `dest`.
pub fn synth_data(family: Family, palette_seed: u64, n: usize, size: usize, dest: &Path) -> Result<Vec<PathBuf>> {
    let d = synth(family, palette_seed, n, size)?;
    std::fs::create_dir_all(dest)?;
    let width = n.to_string().len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let p = dest.join(format!("{}_{:0w$}.ppm", family, i, w = width));
        ppm::write(&p, &d.images, i)?;
        out.push(p);
    }
    let labels: String = d.labels.iter().map(|l| format!("{}\n", l)).collect();
    std::fs::write(dest.join("labels.txt"), labels)?;
    Ok(out)
}

/// `manifest.txt`: config hash, seed and the SHA-256 of every other file
/// in the experiment directory, in name order.
pub fn write_manifest(ctx: &Ctx) -> Result<()> {
    let mut files = Vec::new();
    collect_files(&ctx.out, &ctx.out, &mut files)?;
    files.retain(|f| f != "manifest.txt");
    files.sort();
    let mut s = format!("config_sha256 {}\nseed {}\n", ctx.cfg.hash(), ctx.seed);
    for f in files {
        let bytes = std::fs::read(ctx.out.join(&f))?;
        let _ = writeln!(s, "{}  {}", hex::encode(Sha256::digest(&bytes)), f);
    }
    std::fs::write(ctx.path("manifest.txt"), s)?;
    Ok(())
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if let Ok(rel) = p.strip_prefix(root) {
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}
