//! Task-specific feature-map adapters.
//!
//! An adapter maps the frozen feature map `X` of one generator layer to a
//! task-specific map of the same shape:
//!
//! ```text
//! M_g = f_g(X)                      groupwise 3x3, k channels per filter
//! M_p = f_p(X)                      groupwise 1x1, z channels per filter
//! M   = M_g + beta * M_p            (parallel)   or  f_p(f_g(X)) (sequential)
//! M_r = f_r(resample(X_prev2))      residual bias from two layers back
//! F   = M + M_r
//! ```
//!
//! Groups are contiguous channel blocks, so a group size `k` over `c`
//! channels means `c / k` groups.

use crate::error::{config, contract, Result};
use crate::tensor::{ConvConfig, Element, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CombineMode {
    #[default]
    Parallel,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    #[default]
    NearIdentity,
    Zero,
}

/// Per-layer override of the model-wide adapter settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerOverride {
    pub k: Option<usize>,
    pub z: Option<usize>,
    pub beta: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    /// Channels per 3x3 filter.
    pub k: usize,
    /// Channels per 1x1 filter.
    pub z: usize,
    /// Gate of the 1x1 branch; exactly 0 or 1.
    pub beta: u8,
    #[serde(default)]
    pub mode: CombineMode,
    pub residual_bias: bool,
    #[serde(default)]
    pub init: InitScheme,
    /// When false the generator runs without any adapter.
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default)]
    pub overrides: BTreeMap<usize, LayerOverride>,
}

fn default_true() -> bool {
    true
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            k: 4,
            z: 4,
            beta: 1,
            mode: CombineMode::Parallel,
            residual_bias: true,
            init: InitScheme::NearIdentity,
            enabled: true,
            overrides: BTreeMap::new(),
        }
    }
}

/// Settings resolved for one instrumented layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerAdapterConfig {
    pub k: usize,
    pub z: usize,
    pub beta: u8,
    pub mode: CombineMode,
    pub residual_bias: bool,
    pub init: InitScheme,
}

impl LayerAdapterConfig {
    pub fn uses_pointwise(&self) -> bool {
        self.mode == CombineMode::Sequential || self.beta == 1
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        let mut errs = Vec::new();
        if self.beta > 1 {
            errs.push(format!("beta must be 0 or 1, got {}", self.beta));
        }
        if self.k == 0 || channels % self.k != 0 {
            errs.push(format!("group size k={} does not divide {} channels", self.k, channels));
        }
        if self.uses_pointwise() && (self.z == 0 || channels % self.z != 0) {
            errs.push(format!("group size z={} does not divide {} channels", self.z, channels));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(config(errs.join("; ")))
        }
    }
}

impl AdapterConfig {
    pub fn layer(&self, index: usize) -> LayerAdapterConfig {
        let o = self.overrides.get(&index).copied().unwrap_or_default();
        LayerAdapterConfig {
            k: o.k.unwrap_or(self.k),
            z: o.z.unwrap_or(self.z),
            beta: o.beta.unwrap_or(self.beta),
            mode: self.mode,
            residual_bias: self.residual_bias,
            init: self.init,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.beta > 1 {
            errs.push(format!("beta must be 0 or 1, got {}", self.beta));
        }
        if self.k == 0 || self.z == 0 {
            errs.push("group sizes k and z must be positive".to_string());
        }
        for (l, o) in &self.overrides {
            if o.beta.is_some_and(|b| b > 1) {
                errs.push(format!("layer {} override: beta must be 0 or 1", l));
            }
            if o.k == Some(0) || o.z == Some(0) {
                errs.push(format!("layer {} override: group sizes must be positive", l));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(config(errs.join("; ")))
        }
    }
}

/// Weight and bias of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<P> {
    pub weight: P,
    pub bias: P,
}

impl<P> ConvParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> ConvParams<Q> {
        ConvParams { weight: f(&self.weight), bias: f(&self.bias) }
    }
}

/// `[phi_g, phi_p, phi_r]` of one layer. `P` is a tensor for storage or a
/// graph handle while running.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams<P> {
    pub group3: ConvParams<P>,
    pub group1: Option<ConvParams<P>>,
    pub residual: Option<ConvParams<P>>,
}

impl<P> AdapterParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> AdapterParams<Q> {
        AdapterParams {
            group3: self.group3.map(&mut f),
            group1: self.group1.as_ref().map(|p| p.map(&mut f)),
            residual: self.residual.as_ref().map(|p| p.map(&mut f)),
        }
    }

    /// `(suffix, value)` pairs in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, &P)> {
        let mut out = vec![("g.w", &self.group3.weight), ("g.b", &self.group3.bias)];
        if let Some(p) = &self.group1 {
            out.push(("p.w", &p.weight));
            out.push(("p.b", &p.bias));
        }
        if let Some(r) = &self.residual {
            out.push(("r.w", &r.weight));
            out.push(("r.b", &r.bias));
        }
        out
    }
}

impl<P> AdapterParams<P> {
    /// Mutable `(suffix, value)` pairs in the same order as [`AdapterParams::entries`].
    pub fn entries_mut(&mut self) -> Vec<(&'static str, &mut P)> {
        let mut out: Vec<(&'static str, &mut P)> =
            vec![("g.w", &mut self.group3.weight), ("g.b", &mut self.group3.bias)];
        if let Some(p) = &mut self.group1 {
            out.push(("p.w", &mut p.weight));
            out.push(("p.b", &mut p.bias));
        }
        if let Some(r) = &mut self.residual {
            out.push(("r.w", &mut r.weight));
            out.push(("r.b", &mut r.bias));
        }
        out
    }
}

impl<T: Element> AdapterParams<Tensor<T>> {
    pub fn num_params(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries().iter().all(|(_, t)| t.all_finite())
    }
}

fn check_rank4(g: &Graph<impl Element>, x: Var, what: &str) -> Result<[usize; 4]> {
    let s = g.shape(x);
    if s.len() != 4 {
        return Err(contract(format!("{} expects [B, C, H, W], got {:?}", what, s)));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Groupwise 3x3 convolution `M_g = f_g(X)` with `k` channels per group.
pub fn gco3x3_apply<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    phi: &ConvParams<Var>,
    k: usize,
) -> Result<Var> {
    let [_, c, _, _] = check_rank4(g, x, "gco3x3")?;
    if k == 0 || c % k != 0 {
        return Err(config(format!("group size k={} does not divide {} channels", k, c)));
    }
    if g.shape(phi.weight) != [c, k, 3, 3] {
        return Err(contract(format!(
            "3x3 adapter weight {:?}, expected {:?}",
            g.shape(phi.weight),
            [c, k, 3, 3]
        )));
    }
    g.conv2d(x, phi.weight, Some(phi.bias), ConvConfig::same(c / k, 3))
}

/// Groupwise pointwise convolution `M_p = f_p(X)` with `z` channels per group.
pub fn gco1x1_apply<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    phi: &ConvParams<Var>,
    z: usize,
) -> Result<Var> {
    let [_, c, _, _] = check_rank4(g, x, "gco1x1")?;
    if z == 0 || c % z != 0 {
        return Err(config(format!("group size z={} does not divide {} channels", z, c)));
    }
    if g.shape(phi.weight) != [c, z, 1, 1] {
        return Err(contract(format!(
            "1x1 adapter weight {:?}, expected {:?}",
            g.shape(phi.weight),
            [c, z, 1, 1]
        )));
    }
    g.conv2d(x, phi.weight, Some(phi.bias), ConvConfig::same(c / z, 1))
}

/// `M = M_g + beta * M_p`. With `beta == 0` the result is `M_g` itself.
pub fn combine_parallel<T: Element>(g: &mut Graph<T>, mg: Var, mp: Var, beta: u8) -> Result<Var> {
    if g.shape(mg) != g.shape(mp) {
        return Err(contract(format!(
            "combine: shape mismatch {:?} vs {:?}",
            g.shape(mg),
            g.shape(mp)
        )));
    }
    match beta {
        0 => Ok(mg),
        1 => g.add(mg, mp),
        b => Err(config(format!("beta must be 0 or 1, got {}", b))),
    }
}

/// `M = f_p(f_g(X))`.
pub fn combine_sequential<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    phi_g: &ConvParams<Var>,
    phi_p: &ConvParams<Var>,
    k: usize,
    z: usize,
) -> Result<Var> {
    let mg = gco3x3_apply(g, x, phi_g, k)?;
    gco1x1_apply(g, mg, phi_p, z)
}

/// How a layer-(l-2) map of shape `(c', h')` is brought to `(c, h)`:
/// nearest upsampling by a power-of-two factor, then channel `i` reads
/// source channel `i mod c'` (repeat when `c > c'`, truncate when smaller).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bridge {
    pub upsample_steps: u32,
    pub channel_map: Vec<usize>,
}

impl Bridge {
    pub fn between(src: [usize; 3], dst: [usize; 3]) -> Result<Bridge> {
        let ([cs, hs, ws], [cd, hd, wd]) = (src, dst);
        if cs == 0 || hs == 0 || ws == 0 || hd % hs != 0 || wd % ws != 0 || hd / hs != wd / ws {
            return Err(config(format!(
                "cannot map residual source {:?} onto {:?}",
                src, dst
            )));
        }
        let ratio = hd / hs;
        if !ratio.is_power_of_two() {
            return Err(config(format!(
                "residual source resolution ratio {} is not a power of two",
                ratio
            )));
        }
        Ok(Bridge {
            upsample_steps: ratio.trailing_zeros(),
            channel_map: (0..cd).map(|i| i % cs).collect(),
        })
    }

    pub fn is_identity(&self) -> bool {
        self.upsample_steps == 0 && self.channel_map.iter().enumerate().all(|(i, &j)| i == j)
    }

    /// Applies the resampling stage only.
    pub fn resample<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for _ in 0..self.upsample_steps {
            h = g.upsample2(h)?;
        }
        let src_c = g.shape(h)[1];
        if self.channel_map.len() == src_c && self.channel_map.iter().enumerate().all(|(i, &j)| i == j) {
            return Ok(h);
        }
        g.gather_channels(h, &self.channel_map)
    }
}

/// Residual bias `M_r = f_r(X_{l-2})` reshaped to `target = [B, c, H, W]`.
pub fn residual_bias_apply<T: Element>(
    g: &mut Graph<T>,
    x_prev2: Var,
    phi_r: &ConvParams<Var>,
    target: [usize; 4],
) -> Result<Var> {
    let [b, cs, hs, ws] = check_rank4(g, x_prev2, "residual bias")?;
    if b != target[0] {
        return Err(contract(format!("residual source batch {} vs target {}", b, target[0])));
    }
    let bridge = Bridge::between([cs, hs, ws], [target[1], target[2], target[3]])?;
    let aligned = bridge.resample(g, x_prev2)?;
    let k = g.shape(phi_r.weight).get(1).copied().unwrap_or(0);
    gco3x3_apply(g, aligned, phi_r, k)
}

/// Full adapter `F = combine(X) + M_r`. `x_prev2` is required iff the layer
/// has residual parameters.
pub fn adapter_forward<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    x_prev2: Option<Var>,
    params: &AdapterParams<Var>,
    cfg: &LayerAdapterConfig,
) -> Result<Var> {
    let shape = check_rank4(g, x, "adapter")?;
    cfg.validate(shape[1])?;
    let combined = match cfg.mode {
        CombineMode::Parallel => {
            let mg = gco3x3_apply(g, x, &params.group3, cfg.k)?;
            if cfg.beta == 1 {
                let p = params
                    .group1
                    .as_ref()
                    .ok_or_else(|| config("beta = 1 but the layer has no 1x1 parameters"))?;
                let mp = gco1x1_apply(g, x, p, cfg.z)?;
                combine_parallel(g, mg, mp, 1)?
            } else {
                mg
            }
        }
        CombineMode::Sequential => {
            let p = params
                .group1
                .as_ref()
                .ok_or_else(|| config("sequential mode needs 1x1 parameters"))?;
            combine_sequential(g, x, &params.group3, p, cfg.k, cfg.z)?
        }
    };
    match (&params.residual, cfg.residual_bias) {
        (Some(r), true) => {
            let src = x_prev2.ok_or_else(|| contract("residual bias needs the layer l-2 feature map"))?;
            let mr = residual_bias_apply(g, src, r, shape)?;
            g.add(combined, mr)
        }
        (None, true) => Err(config("residual bias enabled but the layer has no residual parameters")),
        (_, false) => Ok(combined),
    }
}

/// Parameter shapes of one adapter over `c` channels.
pub fn adapter_shapes(c: usize, cfg: &LayerAdapterConfig) -> Vec<(&'static str, Vec<usize>)> {
    let mut out = vec![("g.w", vec![c, cfg.k, 3, 3]), ("g.b", vec![c])];
    if cfg.uses_pointwise() {
        out.push(("p.w", vec![c, cfg.z, 1, 1]));
        out.push(("p.b", vec![c]));
    }
    if cfg.residual_bias {
        out.push(("r.w", vec![c, cfg.k, 3, 3]));
        out.push(("r.b", vec![c]));
    }
    out
}

/// Deterministic initialization for one layer with `c` channels.
///
/// Near-identity: the 3x3 centre tap of each filter holds the within-group
/// identity perturbed by N(0, 0.02^2) noise, and the 1x1 branch
/// holds the within-group identity. In parallel mode with `beta = 1` both
/// branches carry one half so their sum starts near the identity. The
/// residual branch and all biases start at zero.
pub fn adapter_init<T: Element>(c: usize, cfg: &LayerAdapterConfig, seed: u64) -> Result<AdapterParams<Tensor<T>>> {
    cfg.validate(c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.02).expect("valid sigma");
    let (g_scale, p_scale) = match (cfg.mode, cfg.beta) {
        (CombineMode::Parallel, 1) => (0.5, 0.5),
        _ => (1.0, 1.0),
    };
    let near = cfg.init == InitScheme::NearIdentity;
    let k = cfg.k;
    let mut gw = Tensor::<T>::zeros(&[c, k, 3, 3]);
    if near {
        let d = gw.data_mut();
        for o in 0..c {
            d[(o * k + o % k) * 9 + 4] = T::from_f64(g_scale + noise.sample(&mut rng));
        }
    }
    let group3 = ConvParams { weight: gw, bias: Tensor::zeros(&[c]) };
    let group1 = cfg.uses_pointwise().then(|| {
        let z = cfg.z;
        let mut pw = Tensor::<T>::zeros(&[c, z, 1, 1]);
        if near {
            let d = pw.data_mut();
            for o in 0..c {
                d[o * z + o % z] = T::from_f64(p_scale);
            }
        }
        ConvParams { weight: pw, bias: Tensor::zeros(&[c]) }
    });
    let residual = cfg
        .residual_bias
        .then(|| ConvParams { weight: Tensor::zeros(&[c, k, 3, 3]), bias: Tensor::zeros(&[c]) });
    Ok(AdapterParams { group3, group1, residual })
}

/// Registers stored adapter tensors on a graph.
pub fn bind_adapter<T: Element>(
    g: &mut Graph<T>,
    params: &AdapterParams<Tensor<T>>,
    trainable: bool,
) -> AdapterParams<Var> {
    params.map(|t| g.leaf(t.clone(), trainable))
}
