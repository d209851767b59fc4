use std::collections::BTreeMap;

use num_bigint::BigUint;
use proptest::prelude::*;
use rrelu::accounting::{
    active_filters_per_unit, count_flops_oracle, count_flops_paper, count_params, filter_path_distribution,
    predict_savings, savings_report, slope_histogram, CostKind,
};
use rrelu::init::{gmm_high, gmm_low, init_type1};
use rrelu::model::{build_fcnn, build_resnet, build_wrn, ActivationKind, Model, ModelSpec};
use rrelu::pruning::{apply_mask_zero, compact, PruneMask};

fn oracle_matches_formula(spec: ModelSpec) {
    let formula = count_flops_paper(&spec).unwrap();
    let oracle = count_flops_oracle(&Model::new(spec.clone()).unwrap()).unwrap();
    let mut compared = 0;
    for row in &formula.rows {
        let o = oracle.get(&row.layer).unwrap_or_else(|| panic!("oracle lacks {}", row.layer));
        assert_eq!(o.mults, row.mults, "{} mults", row.layer);
        match row.kind {
            CostKind::Join => assert_eq!(o.adds, row.adds, "{} adds", row.layer),
            CostKind::Conv => {
                // c_in·k² − 1 additions per output element
                let outputs = row.mults / conv_taps(&spec, &row.layer);
                assert_eq!(o.adds, row.mults - outputs, "{} adds", row.layer);
            }
            _ => {}
        }
        compared += 1;
    }
    assert!(compared > 0);
}

/// `c_in · k²` of a named convolution.
fn conv_taps(spec: &ModelSpec, name: &str) -> u64 {
    let mut taps = 0;
    rrelu::model::visit_layers(&spec.layers, &mut |l| {
        if let rrelu::model::LayerDef::Conv { name: n, c_in, k, .. } = l {
            if n == name {
                taps = (c_in * k * k) as u64;
            }
        }
    });
    taps
}

#[test]
fn oracle_multiplies_equal_closed_forms() {
    oracle_matches_formula(build_fcnn(784, &[500], 10, ActivationKind::Rrelu));
    oracle_matches_formula(build_resnet(3, 10, ActivationKind::Rrelu).unwrap());
}

#[test]
fn builder_and_accounting_counts_agree() {
    for spec in [
        build_fcnn(784, &[500], 10, ActivationKind::Rrelu),
        build_fcnn(20, &[], 3, ActivationKind::Relu),
        build_resnet(3, 10, ActivationKind::Rrelu).unwrap(),
        build_resnet(9, 10, ActivationKind::Rrelu).unwrap(),
        build_wrn(16, 4, 10, ActivationKind::Rrelu).unwrap(),
    ] {
        let m = Model::new(spec.clone()).unwrap();
        assert_eq!(m.num_params(), count_params(&spec).total(), "{}", spec.name);
    }
    let r20 = count_params(&build_resnet(3, 10, ActivationKind::Relu).unwrap()).total();
    assert!((r20 as f64 / 1e6 - 0.27).abs() < 0.005, "{r20}");
    let r56 = count_params(&build_resnet(9, 10, ActivationKind::Relu).unwrap()).total();
    assert!((r56 as f64 / 1e6 - 0.85).abs() < 0.005, "{r56}");
    let wrn = count_params(&build_wrn(16, 4, 10, ActivationKind::Relu).unwrap()).total() as f64;
    assert!((wrn / 3.08e6 - 1.0).abs() <= 0.15, "{wrn}");
    let s56 = count_params(&build_resnet(9, 10, ActivationKind::Rrelu).unwrap()).slopes();
    assert_eq!(s56, 2016);
    let relu = count_params(&build_fcnn(784, &[500], 10, ActivationKind::Relu));
    let rr = count_params(&build_fcnn(784, &[500], 10, ActivationKind::Rrelu));
    assert_eq!(relu.weights() + relu.bias(), 397_010);
    assert_eq!(rr.total() - relu.total(), 500);
}

#[test]
fn fcnn_savings_and_report() {
    let mut m = Model::new(build_fcnn(784, &[500], 10, ActivationKind::Rrelu)).unwrap();
    init_type1(&mut m, 4);
    let mut slopes = m.slope_bank().layers[0].slopes.clone();
    for s in slopes.iter_mut().take(24) {
        *s = 0.01;
    }
    m.set_slopes("act1", slopes).unwrap();
    let mask = PruneMask::from_threshold(&m, 0.5);
    assert_eq!(mask.pruned_count(), 24);
    let pred = predict_savings(m.spec(), &mask).unwrap();
    let weights: i64 = pred.params.iter().filter(|p| p.0 != "act1").map(|p| p.1).sum();
    assert_eq!(weights, 19_056);
    assert_eq!(pred.params_removed(), 19_056 + 24);
    assert_eq!(pred.flops_removed(), 2 * 19_056);

    let small = compact(&apply_mask_zero(&m, &mask).unwrap(), &mask).unwrap();
    let report = savings_report(&m, &small, 0.5).unwrap();
    assert!((report.filters_ignored_pct() - 4.8).abs() < 1e-9);
    assert!(report.is_consistent());
    assert_eq!(report.params_before() - report.params_after(), 19_056 + 24);
    assert_eq!(report.flops_paper_before() - report.flops_paper_after(), 2 * 19_056);
    let exact_saved = report.flops_exact_before() - report.flops_exact_after();
    assert!(exact_saved > 0);
    let text = report.to_text();
    assert!(text.contains("Filters ignored") && text.contains("4.80%"));
    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert!(csv.starts_with("layer,params_before"));
    assert!(!csv.contains('\r'));

    let same = savings_report(&m, &m, 0.0).unwrap();
    assert_eq!(same.params_before(), same.params_after());
    assert_eq!(same.flops_exact_before(), same.flops_exact_after());
    assert_eq!(same.filters_ignored, 0);
}

/// Pruning `n` filters of a unit's first conv saves `2·c_in·k²·H'W'·n` FLOPs
/// there and `2·n·k²·H'W'·c_out` in the second conv, per the oracle.
#[test]
fn oracle_confirms_conv_savings() {
    let spec = build_resnet(1, 10, ActivationKind::Rrelu).unwrap();
    let mut m = Model::new(spec).unwrap();
    init_type1(&mut m, 1);
    let mut mask = PruneMask::empty(&m);
    let n = 5;
    for l in &mut mask.layers {
        if l.layer == "s2.u1.act1" {
            l.pruned[..n].iter_mut().for_each(|p| *p = true);
        }
    }
    let small = compact(&apply_mask_zero(&m, &mask).unwrap(), &mask).unwrap();
    let before = count_flops_oracle(&m).unwrap();
    let after = count_flops_oracle(&small).unwrap();
    let saved = |l: &str| 2 * (before.get(l).unwrap().mults - after.get(l).unwrap().mults);
    let (c_in, k2, hw, c_out) = (16u64, 9u64, 16 * 16u64, 32u64);
    assert_eq!(saved("s2.u1.conv1"), 2 * c_in * k2 * hw * n as u64);
    assert_eq!(saved("s2.u1.conv2"), 2 * n as u64 * k2 * hw * c_out);
    let pred: BTreeMap<_, _> = predict_savings(m.spec(), &mask).unwrap().flops.into_iter().collect();
    assert_eq!(pred["s2.u1.conv1"] as u64, saved("s2.u1.conv1"));
    assert_eq!(pred["s2.u1.conv2"] as u64, saved("s2.u1.conv2"));
}

fn brute_force(counts: &[i64]) -> BTreeMap<u64, BigUint> {
    let mut out = BTreeMap::new();
    for bits in 0u32..(1 << counts.len()) {
        let len: i64 = (0..counts.len()).filter(|b| bits >> b & 1 == 1).map(|b| counts[b]).sum();
        *out.entry(len as u64).or_insert_with(BigUint::default) += 1u32;
    }
    out
}

proptest! {
    #[test]
    fn path_dp_equals_enumeration(counts in prop::collection::vec(0i64..40, 0..=12)) {
        let d = filter_path_distribution(&counts).unwrap();
        let dp: BTreeMap<u64, BigUint> = d.support().into_iter().collect();
        prop_assert_eq!(&dp, &brute_force(&counts));
        prop_assert_eq!(d.total_paths(), BigUint::from(1u32) << counts.len());
        prop_assert_eq!(d.max_length(), counts.iter().sum::<i64>() as u64);
    }
}

#[test]
fn path_mass_is_exact_beyond_machine_words() {
    let counts = vec![3i64; 100];
    let d = filter_path_distribution(&counts).unwrap();
    assert_eq!(d.total_paths(), BigUint::from(1u32) << 100usize);
    assert_eq!(d.max_length(), 300);
}

#[test]
fn wrn_40_4_path_length_from_the_builder() {
    let spec = build_wrn(40, 4, 10, ActivationKind::Rrelu).unwrap();
    let per_unit = active_filters_per_unit(&spec, None);
    assert_eq!(per_unit.len(), 18);
    let d = filter_path_distribution(&per_unit).unwrap();
    assert_eq!(d.max_length(), per_unit.iter().sum::<i64>() as u64);
    // two convolutions per unit, six units per stage of widths 64/128/256
    assert_eq!(d.max_length(), 2 * 6 * (64 + 128 + 256));
}

#[test]
fn type1_histogram_lies_in_the_init_support() {
    let mut m = Model::new(build_resnet(1, 10, ActivationKind::Rrelu).unwrap()).unwrap();
    init_type1(&mut m, 3);
    let rows = slope_histogram(&m, 40).unwrap();
    let (lo, hi) = (gmm_low() as f32, gmm_high() as f32);
    for (_, l, h, c) in rows.iter().filter(|r| r.0 == "all") {
        if *c > 0 {
            let mid = 0.5 * (l + h);
            assert!(mid.abs() >= lo - (h - l) && mid.abs() <= hi + (h - l), "bin {l}..{h}");
        }
    }
    let total: usize = rows.iter().filter(|r| r.0 == "all").map(|r| r.3).sum();
    assert_eq!(total, m.slope_bank().total());
    assert!(m.slope_bank().iter_abs().all(|s| (0.70..=1.43).contains(&s)));
}
