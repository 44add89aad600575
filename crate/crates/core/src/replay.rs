//! Generative replay for class-incremental classification.
//!
//! At task `t` (1-based) every batch holds `n` real samples of the current
//! task and `n` generated samples for each earlier task, `t * n` in total.
//! Accuracy is measured jointly over every class seen so far.

use crate::adapters::AdapterConfig;
use crate::continual::{ContinualLearner, TaskSpec};
use crate::data::{synth, Dataset, Family};
use crate::error::{config, contract, Error, Result};
use crate::gan::{bind_params, one_hot, GeneratorSpec, ParamMap, TrainConfig, VarMap, LEAKY_SLOPE};
use crate::tensor::{Adam, AdamConfig, ConvConfig, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    Replay,
    NoReplay,
}

impl ReplayMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ReplayMode::Replay => "replay",
            ReplayMode::NoReplay => "no_replay",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayConfig {
    /// Real samples per batch; task `t` batches hold `t * n` rows.
    pub n: usize,
    pub lr: f64,
    pub classes_per_task: usize,
    pub tasks: usize,
    /// Passes over the current task's real data.
    pub epochs: usize,
    /// Channel width of the classifier's conv blocks.
    pub width: usize,
    /// Procedural sequence sizes per class.
    pub per_class_train: usize,
    pub per_class_test: usize,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            n: 16,
            lr: 5e-5,
            classes_per_task: 2,
            tasks: 3,
            epochs: 20,
            width: 16,
            per_class_train: 128,
            per_class_test: 64,
        }
    }
}

impl ReplayConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n == 0 {
            errs.push("replay batch n must be positive".to_string());
        }
        if !(self.lr > 0.0) {
            errs.push(format!("classifier lr must be positive, got {}", self.lr));
        }
        if self.classes_per_task == 0 || self.tasks == 0 {
            errs.push("classes_per_task and tasks must be positive".to_string());
        }
        if self.per_class_train == 0 || self.per_class_test == 0 {
            errs.push("per_class_train and per_class_test must be positive".to_string());
        }
        if self.width == 0 {
            errs.push("classifier width must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(config(errs.join("; ")))
        }
    }

    pub fn total_classes(&self) -> usize {
        self.classes_per_task * self.tasks
    }

    /// Task-local label to the global label space.
    pub fn global_label(&self, task: usize, local: usize) -> Result<usize> {
        if task >= self.tasks || local >= self.classes_per_task {
            return Err(contract(format!("label {} of task {} outside the label space", local, task)));
        }
        Ok(task * self.classes_per_task + local)
    }

    pub fn optimizer(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Source of replayed samples for earlier tasks.
pub trait ReplaySource {
    /// `n` images of task `task` with task-local labels.
    fn sample(&mut self, task: usize, n: usize, seed: u64) -> Result<(Tensor<f32>, Vec<usize>)>;
}

/// Replays from a conditional continual generator; task indices match the
/// learner's task ids.
pub struct GeneratorReplay<'a> {
    pub learner: &'a ContinualLearner,
    pub classes_per_task: usize,
}

impl ReplaySource for GeneratorReplay<'_> {
    fn sample(&mut self, task: usize, n: usize, seed: u64) -> Result<(Tensor<f32>, Vec<usize>)> {
        if !self.learner.store.phi.contains_key(&task) && !(task == 0 && !self.learner.adapters().enabled) {
            return Err(contract(format!("generator has no parameters for past task {}", task)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_1AB5);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..self.classes_per_task)).collect();
        let imgs = self.learner.generate(task, n, Some(&labels), seed)?;
        Ok((imgs, labels))
    }
}

/// Replays stored real data; an upper bound useful for testing.
pub struct StoredReplay {
    pub tasks: Vec<Dataset>,
}

impl ReplaySource for StoredReplay {
    fn sample(&mut self, task: usize, n: usize, seed: u64) -> Result<(Tensor<f32>, Vec<usize>)> {
        let d = self.tasks.get(task).ok_or_else(|| contract(format!("no stored data for past task {}", task)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..d.len())).collect();
        Ok((d.images.select_rows(&idx)?, idx.iter().map(|&i| d.labels[i]).collect()))
    }
}

/// Small conv classifier: four 3x3 conv blocks with average pooling and a
/// linear head over every class of the sequence.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub params: ParamMap<f32>,
    pub n_classes: usize,
    pub resolution: usize,
    opt: Adam,
}

const CONV_BLOCKS: usize = 4;

impl Classifier {
    pub fn new(in_channels: usize, resolution: usize, width: usize, n_classes: usize, opt: AdamConfig, seed: u64) -> Result<Self> {
        if resolution % (1 << CONV_BLOCKS) != 0 {
            return Err(config(format!("classifier resolution {} must be a multiple of 16", resolution)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uni = |shape: &[usize], fan_in: usize| {
            let b = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.gen_range(-b..b) as f32)
        };
        let mut params = ParamMap::new();
        let mut c = in_channels;
        for i in 0..CONV_BLOCKS {
            params.insert(format!("c{}.w", i), uni(&[width, c, 3, 3], c * 9));
            params.insert(format!("c{}.b", i), uni(&[width], c * 9));
            c = width;
        }
        let feat = width * (resolution >> CONV_BLOCKS).pow(2);
        params.insert("fc.w".into(), uni(&[n_classes, feat], feat));
        params.insert("fc.b".into(), uni(&[n_classes], feat));
        Ok(Classifier { params, n_classes, resolution, opt: Adam::new(opt)? })
    }

    fn logits(&self, g: &mut Graph<f32>, vars: &VarMap, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..CONV_BLOCKS {
            h = g.conv2d(h, vars[&format!("c{}.w", i)], Some(vars[&format!("c{}.b", i)]), ConvConfig::same(1, 3))?;
            h = g.leaky_relu(h, LEAKY_SLOPE)?;
            h = g.avg_pool2(h)?;
        }
        let b = g.shape(h)[0];
        let feat = g.value(h).len() / b.max(1);
        h = g.reshape(h, &[b, feat])?;
        g.dense(h, vars["fc.w"], Some(vars["fc.b"]))
    }

    fn check_input(&self, x: &Tensor<f32>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[2] != self.resolution || s[3] != self.resolution {
            return Err(contract(format!("classifier expects [N, C, {r}, {r}] input, got {:?}", s, r = self.resolution)));
        }
        Ok(())
    }

    /// One Adam step on mean cross-entropy; returns the loss.
    pub fn train_step(&mut self, x: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
        self.check_input(x)?;
        if x.shape()[0] != labels.len() || labels.is_empty() {
            return Err(contract(format!("{} images for {} labels", x.shape()[0], labels.len())));
        }
        let mut g = Graph::new();
        let vars = bind_params(&mut g, &self.params, |_| true);
        let xv = g.constant(x.clone());
        let logits = self.logits(&mut g, &vars, xv)?;
        let lsm = g.log_softmax(logits)?;
        let oh = g.constant(one_hot(labels, self.n_classes)?);
        let picked = g.mul(lsm, oh)?;
        let total = g.sum(picked);
        let loss = g.scale(total, -1.0 / labels.len() as f64);
        let lv = g.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(Error::Numeric { location: "classifier loss".into(), detail: format!("{}", lv) });
        }
        let grads = g.backward(loss)?;
        for (name, v) in &vars {
            if let Some(gr) = grads.get(v) {
                let p = self.params.get_mut(name).expect("bound parameter");
                self.opt.step_one(name, p, gr)?;
            }
        }
        Ok(lv)
    }

    /// Argmax predictions, evaluated in chunks of 64.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Vec<usize>> {
        self.check_input(x)?;
        let n = x.shape()[0];
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(64) {
            let len = 64.min(n - start);
            let mut g = Graph::new();
            let vars = bind_params(&mut g, &self.params, |_| false);
            let xv = g.constant(x.slice_rows(start, len)?);
            let logits = self.logits(&mut g, &vars, xv)?;
            let l = g.value(logits);
            for row in l.data().chunks_exact(self.n_classes) {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }
}

/// Predicts labels for a batch of images.
pub trait Predictor {
    fn predict(&self, x: &Tensor<f32>) -> Result<Vec<usize>>;
}

impl Predictor for Classifier {
    fn predict(&self, x: &Tensor<f32>) -> Result<Vec<usize>> {
        Classifier::predict(self, x)
    }
}

/// Accuracy over the union of `test_sets`, whose labels are global.
pub fn evaluate_joint(model: &dyn Predictor, test_sets: &[&Dataset]) -> Result<f64> {
    let total: usize = test_sets.iter().map(|d| d.len()).sum();
    if total == 0 {
        return Err(contract("joint evaluation over an empty test set"));
    }
    let mut correct = 0usize;
    for d in test_sets.iter().filter(|d| !d.is_empty()) {
        let pred = model.predict(&d.images)?;
        correct += pred.iter().zip(&d.labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / total as f64)
}

/// Composition of one optimization batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchRecord {
    /// 1-based task index.
    pub task: usize,
    pub real: usize,
    pub generated: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchAudit {
    pub records: Vec<BatchRecord>,
}

impl BatchAudit {
    /// True iff every batch matches `n` real and `(t - 1) * n` generated rows
    /// (or no generated rows when replay is off).
    pub fn matches_schedule(&self, n: usize, mode: ReplayMode) -> bool {
        !self.records.is_empty()
            && self.records.iter().all(|r| {
                let want = match mode {
                    ReplayMode::Replay => (r.task - 1) * n,
                    ReplayMode::NoReplay => 0,
                };
                r.real == n && r.generated == want
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyCurve {
    pub mode: ReplayMode,
    pub seed: u64,
    /// Joint accuracy after each task.
    pub accuracy: Vec<f64>,
    pub audit: BatchAudit,
}

impl AccuracyCurve {
    pub fn final_accuracy(&self) -> f64 {
        self.accuracy.last().copied().unwrap_or(0.0)
    }

    pub fn csv_rows(&self, out: &mut String) {
        for (i, a) in self.accuracy.iter().enumerate() {
            let _ = writeln!(out, "{},{:.6},{},{}", i + 1, a, self.mode.as_str(), self.seed);
        }
    }
}

pub const CURVE_CSV_HEADER: &str = "task_index,combined_accuracy,replay_mode,seed";

pub fn curves_csv(curves: &[AccuracyCurve]) -> String {
    let mut s = format!("{}\n", CURVE_CSV_HEADER);
    for c in curves {
        c.csv_rows(&mut s);
    }
    s
}

/// Trains a fresh classifier through the sequence. `train[t]` and `test[t]`
/// carry task-local labels in `0..classes_per_task`.
///
/// With replay on, each batch of task `t` gathers `n` fresh generated rows
/// from each earlier task. The real part walks a shuffled pass over the
/// current task every epoch; a short final chunk is topped up from a new
/// shuffle so that every batch holds exactly `n` real rows.
pub fn train_classifier_incremental(
    train: &[Dataset],
    test: &[Dataset],
    source: Option<&mut dyn ReplaySource>,
    cfg: &ReplayConfig,
    seed: u64,
) -> Result<AccuracyCurve> {
    cfg.validate()?;
    if train.len() != cfg.tasks || test.len() != cfg.tasks {
        return Err(contract(format!(
            "{} train and {} test sets for {} tasks",
            train.len(),
            test.len(),
            cfg.tasks
        )));
    }
    let first = &train[0].images;
    if first.shape().len() != 4 {
        return Err(contract("task images must be [N, C, H, W]"));
    }
    let (channels, res) = (first.shape()[1], first.shape()[2]);
    let mode = if source.is_some() { ReplayMode::Replay } else { ReplayMode::NoReplay };
    let mut source = source;
    let to_global = |t: usize, d: &Dataset| -> Result<Dataset> {
        let labels = d.labels.iter().map(|&l| cfg.global_label(t, l)).collect::<Result<Vec<_>>>()?;
        Ok(Dataset { images: d.images.clone(), labels, n_labels: cfg.total_classes() })
    };
    let test_global = test.iter().enumerate().map(|(t, d)| to_global(t, d)).collect::<Result<Vec<_>>>()?;
    let mut clf = Classifier::new(channels, res, cfg.width, cfg.total_classes(), cfg.optimizer(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC1A5_51F1);
    let mut audit = BatchAudit::default();
    let mut accuracy = Vec::new();
    for t in 0..cfg.tasks {
        let cur = to_global(t, &train[t])?;
        if cur.is_empty() {
            return Err(contract(format!("task {} has no training data", t)));
        }
        let steps_per_epoch = cur.len().div_ceil(cfg.n);
        let mut order: Vec<usize> = Vec::new();
        for _ in 0..cfg.epochs {
            for _ in 0..steps_per_epoch {
                let mut idx = Vec::with_capacity(cfg.n);
                while idx.len() < cfg.n {
                    if order.is_empty() {
                        order = (0..cur.len()).collect();
                        order.shuffle(&mut rng);
                    }
                    idx.push(order.pop().expect("non-empty order"));
                }
                let mut imgs = vec![cur.images.select_rows(&idx)?];
                let mut labels: Vec<usize> = idx.iter().map(|&i| cur.labels[i]).collect();
                let mut generated = 0;
                if let Some(src) = source.as_deref_mut() {
                    for past in 0..t {
                        let (x, l) = src.sample(past, cfg.n, rng.gen())?;
                        if x.shape().first() != Some(&cfg.n) || l.len() != cfg.n {
                            return Err(contract(format!("replay source returned {} rows for task {}", l.len(), past)));
                        }
                        for &li in &l {
                            labels.push(cfg.global_label(past, li)?);
                        }
                        imgs.push(x);
                        generated += cfg.n;
                    }
                }
                audit.records.push(BatchRecord { task: t + 1, real: idx.len(), generated });
                let refs: Vec<&Tensor<f32>> = imgs.iter().collect();
                clf.train_step(&Tensor::cat_rows(&refs)?, &labels)?;
            }
        }
        let seen: Vec<&Dataset> = test_global[..=t].iter().collect();
        accuracy.push(evaluate_joint(&clf, &seen)?);
    }
    Ok(AccuracyCurve { mode, seed, accuracy, audit })
}

/// Procedural class-incremental sequence: class `c` of task `t` is one
/// family/palette pair. Returns `(train, test)` with task-local labels.
pub fn procedural_sequence(cfg: &ReplayConfig, size: usize, seed: u64) -> Result<(Vec<Dataset>, Vec<Dataset>)> {
    cfg.validate()?;
    let (per_class_train, per_class_test) = (cfg.per_class_train, cfg.per_class_test);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for t in 0..cfg.tasks {
        let (mut tr, mut te) = (Vec::new(), Vec::new());
        for c in 0..cfg.classes_per_task {
            let g = t * cfg.classes_per_task + c;
            let fam = Family::ALL[g % Family::ALL.len()];
            let d = synth(fam, seed.wrapping_mul(1000).wrapping_add(g as u64), per_class_train + per_class_test, size)?;
            let d = d.relabel(c, cfg.classes_per_task);
            tr.push(d.slice(0, per_class_train)?);
            te.push(d.slice(per_class_train, per_class_test)?);
        }
        train.push(Dataset::concat(&tr.iter().collect::<Vec<_>>())?);
        test.push(Dataset::concat(&te.iter().collect::<Vec<_>>())?);
    }
    Ok((train, test))
}

/// Both arms of the replay comparison on the same sequence and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub replay: AccuracyCurve,
    pub no_replay: AccuracyCurve,
}

/// Trains a conditional continual generator over the procedural sequence
/// (task 0 as the base, later tasks through adapters), then the classifier
/// with and without replay. The generator is forced conditional over the
/// task-local classes; an `embed_dim` of 0 becomes 8.
pub fn replay_experiment(
    gen: &GeneratorSpec,
    acfg: &AdapterConfig,
    tcfg: &TrainConfig,
    rcfg: &ReplayConfig,
    seed: u64,
) -> Result<ReplayOutcome> {
    let mut gen = gen.clone();
    gen.conditional = true;
    gen.n_labels = rcfg.classes_per_task;
    if gen.embed_dim == 0 {
        gen.embed_dim = 8;
    }
    let (train, test) = procedural_sequence(rcfg, gen.resolution(), seed)?;
    let mut learner = ContinualLearner::new(gen, acfg.clone(), tcfg.clone(), seed)?;
    for (t, d) in train.iter().enumerate() {
        let task = TaskSpec { id: t, images: d.images.clone(), labels: d.labels.clone(), iterations: tcfg.iterations };
        if t == 0 {
            learner.train_base(&task, &mut |_, _| {})?;
        } else {
            learner.train_task(&task, &mut |_, _| {})?;
        }
    }
    let mut src = GeneratorReplay { learner: &learner, classes_per_task: rcfg.classes_per_task };
    let replay = train_classifier_incremental(&train, &test, Some(&mut src), rcfg, seed)?;
    let no_replay = train_classifier_incremental(&train, &test, None, rcfg, seed)?;
    Ok(ReplayOutcome { replay, no_replay })
}
