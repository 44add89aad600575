use super::{get, init_block, one_hot, resnet_block, uniform_init, ParamMap, VarMap, LEAKY_SLOPE};
use crate::adapters::{adapter_forward, adapter_init, AdapterConfig, AdapterParams, ConvParams};
use crate::error::{config, contract, Result};
use crate::tensor::{ConvConfig, Element, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub channels: usize,
    pub upsample: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub latent_dim: usize,
    /// Width of the label embedding concatenated to the latent; 0 disables it.
    pub embed_dim: usize,
    pub n_labels: usize,
    /// Labels must be supplied when true.
    pub conditional: bool,
    pub base_channels: usize,
    pub base_res: usize,
    pub blocks: Vec<BlockSpec>,
    pub img_channels: usize,
}

impl Default for GeneratorSpec {
    /// 32x32 toy generator with four residual blocks.
    fn default() -> Self {
        GeneratorSpec {
            latent_dim: 64,
            embed_dim: 1,
            n_labels: 1,
            conditional: false,
            base_channels: 64,
            base_res: 4,
            blocks: vec![
                BlockSpec { channels: 64, upsample: true },
                BlockSpec { channels: 64, upsample: true },
                BlockSpec { channels: 32, upsample: true },
                BlockSpec { channels: 32, upsample: false },
            ],
            img_channels: 3,
        }
    }
}

/// One adapter-instrumented conv layer of the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerInfo {
    pub block: usize,
    /// 0 for the first conv of the block, 1 for the second.
    pub conv: usize,
    pub c_in: usize,
    pub channels: usize,
    pub res: usize,
    /// Shape `[c, h, w]` of the map feeding the residual bias (layer l-2,
    /// clamped to the projected latent map).
    pub source: [usize; 3],
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.latent_dim == 0 {
            errs.push("latent_dim must be positive".to_string());
        }
        if self.n_labels == 0 {
            errs.push("n_labels must be positive".to_string());
        }
        if self.conditional && self.embed_dim == 0 {
            errs.push("conditional generation needs embed_dim > 0".to_string());
        }
        if self.base_channels == 0 || self.base_res == 0 || self.img_channels == 0 {
            errs.push("base_channels, base_res and img_channels must be positive".to_string());
        }
        if self.blocks.is_empty() {
            errs.push("generator needs at least one block".to_string());
        }
        if self.blocks.iter().any(|b| b.channels == 0) {
            errs.push("block channels must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(config(errs.join("; ")))
        }
    }

    /// Output side length.
    pub fn resolution(&self) -> usize {
        self.blocks.iter().fold(self.base_res, |r, b| if b.upsample { r * 2 } else { r })
    }

    pub fn input_dim(&self) -> usize {
        self.latent_dim + self.embed_dim
    }

    /// Shapes `[c, h, w]` of every feature map in order: the projected
    /// latent followed by each instrumented conv output.
    pub fn feature_maps(&self) -> Vec<[usize; 3]> {
        let mut maps = vec![[self.base_channels, self.base_res, self.base_res]];
        for l in self.layers() {
            maps.push([l.channels, l.res, l.res]);
        }
        maps
    }

    /// Instrumented convs, in forward order. The output conv is excluded.
    pub fn layers(&self) -> Vec<LayerInfo> {
        let mut out: Vec<LayerInfo> = Vec::new();
        let mut maps = vec![[self.base_channels, self.base_res, self.base_res]];
        let mut c = self.base_channels;
        let mut res = self.base_res;
        for (bi, b) in self.blocks.iter().enumerate() {
            if b.upsample {
                res *= 2;
            }
            let hidden = c.min(b.channels);
            for (conv, (cin, cout)) in [(c, hidden), (hidden, b.channels)].into_iter().enumerate() {
                let l = out.len() + 1;
                let source = maps[l.saturating_sub(2)];
                out.push(LayerInfo { block: bi, conv, c_in: cin, channels: cout, res, source });
                maps.push([cout, res, res]);
            }
            c = b.channels;
        }
        out
    }

    /// Whether the label embedding is task-specific. With adapters off it
    /// belongs to the global parameters instead.
    pub fn embed_in_task(&self, acfg: &AdapterConfig) -> bool {
        acfg.enabled && self.embed_dim > 0
    }

    /// Global parameters with default initialization.
    pub fn init_theta<T: Element>(&self, acfg: &AdapterConfig, seed: u64) -> Result<ParamMap<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamMap::new();
        let r0 = self.base_res;
        let fc_out = self.base_channels * r0 * r0;
        p.insert("fc.w".into(), uniform_init(&[fc_out, self.input_dim()], self.input_dim(), &mut rng));
        p.insert("fc.b".into(), uniform_init(&[fc_out], self.input_dim(), &mut rng));
        let mut c = self.base_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            init_block(&mut p, &format!("b{}", i), c, b.channels, &mut rng);
            c = b.channels;
        }
        p.insert("img.w".into(), uniform_init(&[self.img_channels, c, 3, 3], c * 9, &mut rng));
        p.insert("img.b".into(), uniform_init(&[self.img_channels], c * 9, &mut rng));
        if self.embed_dim > 0 && !self.embed_in_task(acfg) {
            p.insert("embed".into(), normal_init(&[self.n_labels, self.embed_dim], &mut rng));
        }
        Ok(p)
    }

    /// Fresh task parameters: one adapter per instrumented layer plus the
    /// label embedding when it is task-specific.
    pub fn init_task<T: Element>(&self, acfg: &AdapterConfig, seed: u64) -> Result<TaskParams<Tensor<T>>> {
        self.validate()?;
        acfg.validate()?;
        if !acfg.enabled {
            return Err(contract("adapters are disabled"));
        }
        let mut layers = Vec::new();
        for (i, l) in self.layers().iter().enumerate() {
            let lcfg = acfg.layer(i);
            lcfg.validate(l.channels).map_err(|e| config(format!("layer {}: {}", i, e)))?;
            let layer_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1);
            layers.push(adapter_init(l.channels, &lcfg, layer_seed)?);
        }
        let embed = self.embed_in_task(acfg).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE3B0_C442_98FC_1C14);
            normal_init(&[self.n_labels, self.embed_dim], &mut rng)
        });
        Ok(TaskParams { layers, embed })
    }
}

fn normal_init<T: Element>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        T::from_f64(v)
    })
}

/// Task-specific generator parameters φ^t.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskParams<P> {
    pub layers: Vec<AdapterParams<P>>,
    pub embed: Option<P>,
}

impl<P> TaskParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> TaskParams<Q> {
        TaskParams { layers: self.layers.iter().map(|l| l.map(&mut f)).collect(), embed: self.embed.as_ref().map(f) }
    }

    /// Named entries in a fixed order: `l{i}.{suffix}` then `embed`.
    pub fn entries(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (s, v) in l.entries() {
                out.push((format!("l{}.{}", i, s), v));
            }
        }
        if let Some(e) = &self.embed {
            out.push(("embed".to_string(), e));
        }
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut P)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (s, v) in l.entries_mut() {
                out.push((format!("l{}.{}", i, s), v));
            }
        }
        if let Some(e) = &mut self.embed {
            out.push(("embed".to_string(), e));
        }
        out
    }
}

impl<T: Element> TaskParams<Tensor<T>> {
    pub fn to_named(&self) -> ParamMap<T> {
        self.entries().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    /// Rebuilds from named tensors, the inverse of [`TaskParams::to_named`].
    pub fn from_named(map: &ParamMap<T>) -> Result<Self> {
        let mut layers: BTreeMap<usize, BTreeMap<String, Tensor<T>>> = BTreeMap::new();
        let mut embed = None;
        for (name, t) in map {
            if name == "embed" {
                embed = Some(t.clone());
                continue;
            }
            let (idx, suffix) = name
                .strip_prefix('l')
                .and_then(|r| r.split_once('.'))
                .and_then(|(i, s)| i.parse::<usize>().ok().map(|i| (i, s)))
                .ok_or_else(|| contract(format!("unexpected task parameter {}", name)))?;
            layers.entry(idx).or_default().insert(suffix.to_string(), t.clone());
        }
        let mut out = Vec::new();
        for (expect, (idx, mut m)) in layers.into_iter().enumerate() {
            if idx != expect {
                return Err(contract(format!("task parameters skip layer {}", expect)));
            }
            let mut pair = |w: &str, b: &str| -> Result<Option<ConvParams<Tensor<T>>>> {
                match (m.remove(w), m.remove(b)) {
                    (Some(weight), Some(bias)) => Ok(Some(ConvParams { weight, bias })),
                    (None, None) => Ok(None),
                    _ => Err(contract(format!("layer {} has {} without {} or vice versa", idx, w, b))),
                }
            };
            let group3 = pair("g.w", "g.b")?.ok_or_else(|| contract(format!("layer {} lacks g.w", idx)))?;
            let group1 = pair("p.w", "p.b")?;
            let residual = pair("r.w", "r.b")?;
            if let Some(extra) = m.keys().next() {
                return Err(contract(format!("unexpected task parameter l{}.{}", idx, extra)));
            }
            out.push(AdapterParams { group3, group1, residual });
        }
        Ok(TaskParams { layers: out, embed })
    }

    pub fn num_params(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries().iter().all(|(_, t)| t.all_finite())
    }
}

/// Runs the generator. `phi` must be present iff adapters are enabled;
/// every instrumented conv output is replaced by its adapter output.
#[allow(clippy::too_many_arguments)]
pub fn generator_forward<T: Element>(
    g: &mut Graph<T>,
    spec: &GeneratorSpec,
    acfg: &AdapterConfig,
    theta: &VarMap,
    phi: Option<&TaskParams<Var>>,
    zn: Var,
    labels: Option<&[usize]>,
) -> Result<Var> {
    let zs = g.shape(zn).to_vec();
    if zs.len() != 2 || zs[1] != spec.latent_dim {
        return Err(contract(format!("latent must be [B, {}], got {:?}", spec.latent_dim, zs)));
    }
    let b = zs[0];
    if acfg.enabled != phi.is_some() {
        return Err(contract("task parameters must be given exactly when adapters are enabled"));
    }
    let phi_layers = phi.map(|p| p.layers.len()).unwrap_or(0);
    let layers = spec.layers();
    if phi.is_some() && phi_layers != layers.len() {
        return Err(contract(format!("{} adapters for {} instrumented layers", phi_layers, layers.len())));
    }
    let labels: Vec<usize> = match labels {
        Some(l) if l.len() == b => l.to_vec(),
        Some(l) => return Err(contract(format!("{} labels for batch of {}", l.len(), b))),
        None if spec.conditional => return Err(contract("conditional generator needs labels")),
        None => vec![0; b],
    };
    let input = if spec.embed_dim > 0 {
        let table = if spec.embed_in_task(acfg) {
            phi.and_then(|p| p.embed).ok_or_else(|| contract("task parameters lack the label embedding"))?
        } else {
            get(theta, "embed")?
        };
        let oh = g.constant(one_hot(&labels, spec.n_labels)?);
        let e = g.matmul(oh, table, false, false)?;
        g.concat_channels(&[zn, e])?
    } else {
        zn
    };
    let fc_w = get(theta, "fc.w")?;
    let fc_b = get(theta, "fc.b")?;
    let h = g.dense(input, fc_w, Some(fc_b))?;
    let mut h = g.reshape(h, &[b, spec.base_channels, spec.base_res, spec.base_res])?;
    let mut maps: Vec<Var> = vec![h];
    let mut c = spec.base_channels;
    for (bi, blk) in spec.blocks.iter().enumerate() {
        if blk.upsample {
            h = g.upsample2(h)?;
        }
        h = resnet_block(g, theta, &format!("b{}", bi), h, c, blk.channels, |g, _conv, x| {
            let l = maps.len();
            let out = match phi {
                Some(p) => {
                    let src = maps[l.saturating_sub(2)];
                    adapter_forward(g, x, Some(src), &p.layers[l - 1], &acfg.layer(l - 1))?
                }
                None => x,
            };
            maps.push(out);
            Ok(out)
        })?;
        c = blk.channels;
    }
    let a = g.leaky_relu(h, LEAKY_SLOPE)?;
    let w = get(theta, "img.w")?;
    let bias = get(theta, "img.b")?;
    let out = g.conv2d(a, w, Some(bias), ConvConfig::same(1, 3))?;
    Ok(g.tanh(out))
}
