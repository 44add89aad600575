//! Experiment configuration (TOML).

use cagn_core::adapters::AdapterConfig;
use cagn_core::data::{synth, Dataset, Family};
use cagn_core::gan::{GeneratorSpec, TrainConfig};
use cagn_core::replay::ReplayConfig;
use cagn_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// One task's data. Either `family` (procedural) or `dir` (PPM images).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub family: Option<Family>,
    #[serde(default)]
    pub palette_seed: u64,
    pub dir: Option<PathBuf>,
    /// Labels file for `dir`, one task-local id per line.
    pub labels: Option<PathBuf>,
    /// Training images; procedural tasks generate `samples + held_out`.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Images kept aside for evaluation.
    #[serde(default = "default_samples")]
    pub held_out: usize,
    /// Overrides `train.iterations` for this task.
    pub iterations: Option<usize>,
}

fn default_samples() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub feature_seed: u64,
    /// Generated samples per proxy-FID estimate.
    pub samples: usize,
    pub noise_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { feature_seed: 1234, samples: 256, noise_seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub tasks: Vec<TaskEntry>,
    #[serde(default)]
    pub generator: GeneratorSpec,
    #[serde(default)]
    pub adapters: AdapterConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub replay: ReplayConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::NotFound(format!("config file {}", path.display())))?;
        ExperimentConfig::parse(&text)
    }

    /// Reports every invalid field in one error.
    pub fn validate(&self) -> Result<()> {
        let mut errs: Vec<String> = Vec::new();
        let mut push = |r: Result<()>, what: &str| {
            if let Err(e) = r {
                errs.push(format!("{}: {}", what, e));
            }
        };
        push(self.generator.validate(), "generator");
        push(self.adapters.validate(), "adapters");
        push(self.train.validate(), "train");
        push(self.replay.validate(), "replay");
        if self.generator.validate().is_ok() && self.adapters.enabled {
            for (i, l) in self.generator.layers().iter().enumerate() {
                push(self.adapters.layer(i).validate(l.channels), &format!("adapters layer {}", i));
            }
        }
        if self.eval.samples < 65 {
            errs.push(format!("eval.samples must be at least 65 for a 64-d covariance, got {}", self.eval.samples));
        }
        if self.tasks.is_empty() {
            errs.push("at least one task is required".into());
        }
        for (i, t) in self.tasks.iter().enumerate() {
            match (&t.family, &t.dir) {
                (Some(_), Some(_)) => errs.push(format!("task {}: set either family or dir, not both", i)),
                (None, None) => errs.push(format!("task {}: needs a family or a dir", i)),
                (Some(_), None) if t.labels.is_some() => errs.push(format!("task {}: labels only apply to dir tasks", i)),
                _ => {}
            }
            if t.family.is_some() && (t.samples == 0 || t.held_out == 0) {
                errs.push(format!("task {}: samples and held_out must be positive", i));
            }
            if t.iterations == Some(0) {
                errs.push(format!("task {}: iterations must be positive", i));
            }
        }
        if self.tasks.len() > 1 && !self.adapters.enabled {
            errs.push("adapter tasks need adapters.enabled = true".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    pub fn iterations(&self, task: usize) -> usize {
        self.tasks[task].iterations.unwrap_or(self.train.iterations)
    }

    /// `(train, held_out)` splits of one task.
    pub fn task_data(&self, task: usize, base_dir: &Path) -> Result<(Dataset, Dataset)> {
        let t = self.tasks.get(task).ok_or_else(|| Error::NotFound(format!("task {} in config", task)))?;
        let size = self.generator.resolution();
        let d = match (&t.family, &t.dir) {
            (Some(f), _) => synth(*f, t.palette_seed, t.samples + t.held_out, size)?,
            (None, Some(dir)) => {
                let dir = base_dir.join(dir);
                let labels = t.labels.as_ref().map(|p| base_dir.join(p));
                crate::ppm::load_dir(&dir, labels.as_deref(), size)?
            }
            (None, None) => return Err(Error::Config(format!("task {} has no data source", task))),
        };
        if d.labels.iter().any(|&l| l >= self.generator.n_labels) {
            return Err(Error::Config(format!("task {} labels exceed generator.n_labels", task)));
        }
        if t.family.is_some() {
            Ok((d.slice(0, t.samples)?, d.slice(t.samples, t.held_out)?))
        } else {
            // Directory tasks hold out every fourth image.
            let idx: Vec<usize> = (0..d.len()).collect();
            let (held, train): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|i| i % 4 == 3);
            if held.is_empty() || train.is_empty() {
                return Err(Error::Config(format!("task {} needs at least 4 images", task)));
            }
            let pick = |ix: &[usize]| -> Result<Dataset> {
                Ok(Dataset {
                    images: d.images.select_rows(ix)?,
                    labels: ix.iter().map(|&i| d.labels[i]).collect(),
                    n_labels: d.n_labels,
                })
            };
            Ok((pick(&train)?, pick(&held)?))
        }
    }

    /// SHA-256 of the canonical TOML re-serialization.
    pub fn hash(&self) -> String {
        let canon = toml::to_string(self).unwrap_or_default();
        hex::encode(Sha256::digest(canon.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses() {
        let c = ExperimentConfig::parse("[[tasks]]\nfamily = \"blobs\"\n").unwrap();
        assert_eq!(c.tasks.len(), 1);
        assert_eq!(c.generator, GeneratorSpec::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::parse("bogus = 1\n[[tasks]]\nfamily = \"blobs\"\n").is_err());
        assert!(ExperimentConfig::parse("[[tasks]]\nfamily = \"blobs\"\n[train]\nlr = 1.0\n").is_err());
    }

    #[test]
    fn every_failure_reported() {
        let text = "[[tasks]]\nfamily = \"blobs\"\niterations = 0\n[adapters]\nk = 3\nbeta = 2\n[train]\ngamma = -1.0\n";
        let e = ExperimentConfig::parse(text).unwrap_err().to_string();
        for needle in ["beta", "gamma", "iterations", "k=3"] {
            assert!(e.contains(needle), "{} missing from {}", needle, e);
        }
    }
}
