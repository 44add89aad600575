//! Exact parameter and MAC accounting for the generator and its adapters.
//!
//! One MAC counts as one FLOP unit. Bias parameters are counted; bias adds,
//! activations and resampling are not counted as MACs.

use crate::adapters::AdapterConfig;
use crate::error::{config, contract, Result};
use crate::gan::GeneratorSpec;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LayerCost {
    pub params: u64,
    pub macs: u64,
}

impl std::ops::Add for LayerCost {
    type Output = LayerCost;
    fn add(self, o: LayerCost) -> LayerCost {
        LayerCost { params: self.params + o.params, macs: self.macs + o.macs }
    }
}

impl std::iter::Sum for LayerCost {
    fn sum<I: Iterator<Item = LayerCost>>(it: I) -> LayerCost {
        it.fold(LayerCost::default(), |a, b| a + b)
    }
}

/// Cost of a conv whose filters each read `group_size` input channels.
#[allow(clippy::too_many_arguments)]
pub fn conv_cost(
    c_in: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    group_size: usize,
    h_out: usize,
    w_out: usize,
    bias: bool,
) -> Result<LayerCost> {
    if group_size == 0 || c_in % group_size != 0 {
        return Err(config(format!("group size {} does not divide {} input channels", group_size, c_in)));
    }
    let groups = c_in / group_size;
    if c_out % groups != 0 {
        return Err(config(format!("{} output channels not divisible into {} groups", c_out, groups)));
    }
    let weights = (kh * kw * group_size * c_out) as u64;
    Ok(LayerCost {
        params: weights + if bias { c_out as u64 } else { 0 },
        macs: weights * (h_out * w_out) as u64,
    })
}

/// Fully connected layer.
pub fn dense_cost(n_in: usize, n_out: usize, bias: bool) -> LayerCost {
    let w = (n_in * n_out) as u64;
    LayerCost { params: w + if bias { n_out as u64 } else { 0 }, macs: w }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostEntry {
    pub name: String,
    pub cost: LayerCost,
}

/// Exact percentage kept as a fraction `100 * num / den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn pct(self) -> f64 {
        if self.den == 0 {
            0.0
        } else {
            100.0 * self.num as f64 / self.den as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub base: Vec<CostEntry>,
    /// Cost of one task's φ.
    pub adapter: Vec<CostEntry>,
    pub base_total: LayerCost,
    pub adapter_total: LayerCost,
    pub growth_params: Ratio,
    pub growth_flops: Ratio,
}

impl CostReport {
    pub fn growth_pct_params(&self) -> f64 {
        self.growth_params.pct()
    }

    pub fn growth_pct_flops(&self) -> f64 {
        self.growth_flops.pct()
    }

    /// Total for θ plus `tasks` adapter sets.
    pub fn total_after(&self, tasks: usize) -> LayerCost {
        LayerCost {
            params: self.base_total.params + tasks as u64 * self.adapter_total.params,
            macs: self.base_total.macs + self.adapter_total.macs,
        }
    }

    /// `section,layer,params,macs` rows followed by the totals.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("section,layer,params,macs\n");
        for (sec, rows) in [("base", &self.base), ("adapter", &self.adapter)] {
            for e in rows.iter() {
                let _ = writeln!(s, "{},{},{},{}", sec, e.name, e.cost.params, e.cost.macs);
            }
        }
        let _ = writeln!(s, "total,base,{},{}", self.base_total.params, self.base_total.macs);
        let _ = writeln!(s, "total,adapter,{},{}", self.adapter_total.params, self.adapter_total.macs);
        let _ = writeln!(
            s,
            "growth_pct,adapter,{:.2},{:.2}",
            round2(self.growth_pct_params()),
            round2(self.growth_pct_flops())
        );
        s
    }

    /// Two-row table: base model and base plus one task's adapters.
    pub fn to_table(&self) -> String {
        let adapted = self.base_total + self.adapter_total;
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>14} {:>12} {:>13} {:>13}", "Method", "Parameter (M)", "FLOPs (G)", "Param growth", "FLOPs growth");
        let _ = writeln!(
            s,
            "{:<16} {:>14.4} {:>12.4} {:>13} {:>13}",
            "Base",
            self.base_total.params as f64 / 1e6,
            self.base_total.macs as f64 / 1e9,
            "-",
            "-"
        );
        let _ = writeln!(
            s,
            "{:<16} {:>14.4} {:>12.4} {:>12.2}% {:>12.2}%",
            "Base + adapters",
            adapted.params as f64 / 1e6,
            adapted.macs as f64 / 1e9,
            round2(self.growth_pct_params()),
            round2(self.growth_pct_flops())
        );
        s
    }
}

/// Rounds half-up to two decimals for display.
pub fn round2(x: f64) -> f64 {
    (x * 100.0 + 0.5).floor() / 100.0
}

/// Per-layer costs of the generator at its native resolution, and of one
/// task's adapters (3x3 branch, 1x1 branch when used, residual bias when
/// enabled, task-specific embedding when present).
pub fn model_cost(spec: &GeneratorSpec, acfg: &AdapterConfig) -> Result<CostReport> {
    spec.validate()?;
    let mut base = Vec::new();
    let r0 = spec.base_res;
    base.push(CostEntry { name: "fc".into(), cost: dense_cost(spec.input_dim(), spec.base_channels * r0 * r0, true) });
    if spec.embed_dim > 0 && !spec.embed_in_task(acfg) {
        base.push(CostEntry {
            name: "embed".into(),
            cost: LayerCost { params: (spec.n_labels * spec.embed_dim) as u64, macs: 0 },
        });
    }
    let layers = spec.layers();
    let mut c = spec.base_channels;
    let mut res = r0;
    for (bi, b) in spec.blocks.iter().enumerate() {
        if b.upsample {
            res *= 2;
        }
        let hidden = c.min(b.channels);
        base.push(CostEntry { name: format!("b{}.conv0", bi), cost: conv_cost(c, hidden, 3, 3, c, res, res, true)? });
        base.push(CostEntry {
            name: format!("b{}.conv1", bi),
            cost: conv_cost(hidden, b.channels, 3, 3, hidden, res, res, true)?,
        });
        if c != b.channels {
            base.push(CostEntry { name: format!("b{}.short", bi), cost: conv_cost(c, b.channels, 1, 1, c, res, res, false)? });
        }
        c = b.channels;
    }
    base.push(CostEntry { name: "img".into(), cost: conv_cost(c, spec.img_channels, 3, 3, c, res, res, true)? });

    let mut adapter = Vec::new();
    if acfg.enabled {
        acfg.validate()?;
        for (i, l) in layers.iter().enumerate() {
            let lc = acfg.layer(i);
            lc.validate(l.channels)?;
            let (ch, r) = (l.channels, l.res);
            adapter.push(CostEntry { name: format!("l{}.g", i), cost: conv_cost(ch, ch, 3, 3, lc.k, r, r, true)? });
            if lc.uses_pointwise() {
                adapter.push(CostEntry { name: format!("l{}.p", i), cost: conv_cost(ch, ch, 1, 1, lc.z, r, r, true)? });
            }
            if lc.residual_bias {
                adapter.push(CostEntry { name: format!("l{}.r", i), cost: conv_cost(ch, ch, 3, 3, lc.k, r, r, true)? });
            }
        }
        if spec.embed_in_task(acfg) {
            adapter.push(CostEntry {
                name: "embed".into(),
                cost: LayerCost { params: (spec.n_labels * spec.embed_dim) as u64, macs: 0 },
            });
        }
    }
    let base_total: LayerCost = base.iter().map(|e| e.cost).sum();
    let adapter_total: LayerCost = adapter.iter().map(|e| e.cost).sum();
    Ok(CostReport {
        growth_params: Ratio { num: adapter_total.params, den: base_total.params },
        growth_flops: Ratio { num: adapter_total.macs, den: base_total.macs },
        base,
        adapter,
        base_total,
        adapter_total,
    })
}

/// Percentage growth `(params, flops)` from base to adapted totals.
pub fn growth(base: (f64, f64), adapted: (f64, f64)) -> Result<(f64, f64)> {
    if !(base.0 > 0.0 && base.1 > 0.0) {
        return Err(contract(format!("growth needs positive base totals, got {:?}", base)));
    }
    Ok((100.0 * (adapted.0 - base.0) / base.0, 100.0 * (adapted.1 - base.1) / base.1))
}

/// Published reference row: base 52.16M params / 14.75G FLOPs, adapted
/// 58.88M / 19.69G, printed growth 12.88% / 35.55%.
pub const REFERENCE_BASE: (f64, f64) = (52.16, 14.75);
pub const REFERENCE_ADAPTED: (f64, f64) = (58.88, 19.69);
pub const REFERENCE_PRINTED_GROWTH: (f64, f64) = (12.88, 35.55);

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceCheck {
    pub computed: (f64, f64),
    pub printed: (f64, f64),
    pub params_match: bool,
    pub flops_match: bool,
    pub note: String,
}

/// Recomputes the published growth percentages and flags any that do not
/// follow from the published totals.
pub fn reference_check() -> ReferenceCheck {
    let computed = growth(REFERENCE_BASE, REFERENCE_ADAPTED).expect("positive reference totals");
    let printed = REFERENCE_PRINTED_GROWTH;
    let params_match = (round2(computed.0) - printed.0).abs() <= 0.01 + 1e-9;
    let flops_match = (round2(computed.1) - printed.1).abs() <= 0.01 + 1e-9;
    let mut note = format!(
        "reference row: params growth computed {:.2}% vs printed {:.2}% ({})",
        round2(computed.0),
        printed.0,
        if params_match { "match" } else { "MISMATCH" }
    );
    let _ = write!(
        note,
        "; FLOPs growth computed {:.2}% vs printed {:.2}% ({})",
        round2(computed.1),
        printed.1,
        if flops_match { "match" } else { "UNRECONCILED: printed value does not follow from the printed totals" }
    );
    ReferenceCheck { computed, printed, params_match, flops_match, note }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grouped_conv_weights() {
        let full = conv_cost(64, 64, 3, 3, 64, 1, 1, false).unwrap();
        assert_eq!(full.params, 36864);
        assert_eq!(conv_cost(64, 64, 3, 3, 8, 1, 1, false).unwrap().params, 4608);
        let p = conv_cost(64, 64, 1, 1, 8, 1, 1, false).unwrap();
        assert_eq!(conv_cost(64, 64, 1, 1, 64, 1, 1, false).unwrap().params / p.params, 8);
        assert!(conv_cost(64, 64, 3, 3, 7, 1, 1, false).is_err());
    }

    #[test]
    fn macs_scale_with_output_area() {
        let c = conv_cost(16, 32, 3, 3, 16, 8, 4, true).unwrap();
        assert_eq!(c.params, 9 * 16 * 32 + 32);
        assert_eq!(c.macs, 9 * 16 * 32 * 32);
    }

    #[test]
    fn disabled_adapters_cost_nothing() {
        let acfg = AdapterConfig { enabled: false, ..AdapterConfig::default() };
        let r = model_cost(&GeneratorSpec::default(), &acfg).unwrap();
        assert_eq!(r.adapter_total, LayerCost::default());
        assert_eq!(r.growth_pct_params(), 0.0);
    }

    #[test]
    fn growth_errors_on_zero_base() {
        assert!(growth((0.0, 1.0), (1.0, 1.0)).is_err());
        assert_eq!(growth((3.0, 4.0), (3.0, 4.0)).unwrap(), (0.0, 0.0));
    }
}
