use cagn_core::adapters::AdapterConfig;
use cagn_core::costing::*;
use cagn_core::gan::{BlockSpec, GeneratorSpec};

#[test]
fn standard_and_grouped_weight_counts() {
    let std = conv_cost(64, 64, 3, 3, 64, 1, 1, false).unwrap();
    assert_eq!(std.params, 36864);
    let grouped = conv_cost(64, 64, 3, 3, 8, 1, 1, false).unwrap();
    assert_eq!(grouped.params, 4608);
    assert_eq!(std.params / grouped.params, 8);
    let pw = conv_cost(64, 64, 1, 1, 64, 1, 1, false).unwrap();
    let gpw = conv_cost(64, 64, 1, 1, 8, 1, 1, false).unwrap();
    assert_eq!(pw.params, 8 * gpw.params);
    assert!(conv_cost(64, 64, 3, 3, 7, 1, 1, false).is_err());
}

#[test]
fn ratios_are_integer_exact_over_the_grid() {
    for c in [16usize, 32, 64] {
        for k in [2usize, 4, 8] {
            let full3 = conv_cost(c, c, 3, 3, c, 4, 4, false).unwrap();
            let g3 = conv_cost(c, c, 3, 3, k, 4, 4, false).unwrap();
            assert_eq!(full3.params % g3.params, 0);
            assert_eq!(full3.params / g3.params, (c / k) as u64);
            assert_eq!(full3.macs / g3.macs, (c / k) as u64);
            let full1 = conv_cost(c, c, 1, 1, c, 4, 4, false).unwrap();
            let g1 = conv_cost(c, c, 1, 1, k, 4, 4, false).unwrap();
            assert_eq!(full1.params, g1.params * (c / k) as u64);
        }
    }
}

#[test]
fn biases_count_as_params_only() {
    let a = conv_cost(8, 16, 3, 3, 8, 5, 5, true).unwrap();
    let b = conv_cost(8, 16, 3, 3, 8, 5, 5, false).unwrap();
    assert_eq!(a.params - b.params, 16);
    assert_eq!(a.macs, b.macs);
    assert_eq!(b.macs, 16 * 8 * 9 * 25);
    let d = dense_cost(10, 4, true);
    assert_eq!((d.params, d.macs), (44, 40));
}

#[test]
fn published_row_reproduces_params_and_flags_flops() {
    let r = reference_check();
    assert!(r.params_match);
    assert!(!r.flops_match);
    assert!((round2(r.computed.0) - 12.88).abs() <= 0.01);
    assert!((round2(r.computed.1) - 33.49).abs() <= 0.01);
    assert!(r.note.contains("UNRECONCILED"));
    assert!(growth((0.0, 1.0), (1.0, 1.0)).is_err());
}

#[test]
fn model_totals_add_up() {
    let spec = GeneratorSpec::default();
    let acfg = AdapterConfig::default();
    let r = model_cost(&spec, &acfg).unwrap();
    let bp: u64 = r.base.iter().map(|e| e.cost.params).sum();
    let am: u64 = r.adapter.iter().map(|e| e.cost.macs).sum();
    assert_eq!(bp, r.base_total.params);
    assert_eq!(am, r.adapter_total.macs);
    let after = r.total_after(3);
    assert_eq!(after.params, r.base_total.params + 3 * r.adapter_total.params);
    // Four blocks, two instrumented convs each.
    assert_eq!(r.adapter.iter().filter(|e| e.name.ends_with(".g")).count(), 8);
}

#[test]
fn toy_default_growth_is_pinned() {
    let r = model_cost(&GeneratorSpec::default(), &AdapterConfig::default()).unwrap();
    let (p, f) = (r.growth_pct_params(), r.growth_pct_flops());
    assert!(p < 20.0 && f < 20.0, "params {} flops {}", p, f);
    assert_eq!((r.growth_params.num, r.growth_params.den, r.growth_flops.num, r.growth_flops.den), (30337, 264419, 13074432, 73827328));
}

#[test]
fn disabling_branches_removes_exactly_their_cost() {
    let spec = GeneratorSpec::default();
    let full = model_cost(&spec, &AdapterConfig::default()).unwrap();
    let no_p = model_cost(&spec, &AdapterConfig { beta: 0, ..AdapterConfig::default() }).unwrap();
    let pw: u64 = full.adapter.iter().filter(|e| e.name.ends_with(".p")).map(|e| e.cost.params).sum();
    assert!(pw > 0);
    assert_eq!(full.adapter_total.params - no_p.adapter_total.params, pw);
    let off = model_cost(&spec, &AdapterConfig { enabled: false, ..AdapterConfig::default() }).unwrap();
    assert_eq!((off.adapter_total.params, off.adapter_total.macs), (0, 0));
    assert_eq!(off.growth_pct_params(), 0.0);
}

#[test]
fn macs_scale_with_width() {
    let spec = |c: usize| GeneratorSpec {
        latent_dim: 16,
        embed_dim: 0,
        base_channels: c,
        blocks: vec![BlockSpec { channels: c, upsample: true }, BlockSpec { channels: c, upsample: true }],
        ..GeneratorSpec::default()
    };
    let acfg = |c: usize| AdapterConfig { k: c / 8, z: c / 8, residual_bias: false, ..AdapterConfig::default() };
    let a = model_cost(&spec(16), &acfg(16)).unwrap();
    let b = model_cost(&spec(32), &acfg(32)).unwrap();
    // Adapter MACs per instrumented conv scale with c*k, base conv MACs with c^2.
    let conv_macs = |r: &CostReport| -> u64 { r.base.iter().filter(|e| e.name.contains(".conv")).map(|e| e.cost.macs).sum() };
    assert_eq!(4 * conv_macs(&a), conv_macs(&b));
    assert_eq!(4 * a.adapter_total.macs, b.adapter_total.macs);
}

#[test]
fn csv_and_table_layout() {
    let r = model_cost(&GeneratorSpec::default(), &AdapterConfig::default()).unwrap();
    let csv = r.to_csv();
    assert_eq!(csv.lines().next(), Some("section,layer,params,macs"));
    assert!(csv.lines().any(|l| l.starts_with("total,base,")));
    assert!(csv.lines().any(|l| l.starts_with("growth_pct,adapter,")));
    let t = r.to_table();
    assert!(t.contains("Param growth") && t.contains("FLOPs growth"));
}
