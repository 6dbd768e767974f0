use std::collections::BTreeSet;

use fedshard::analysis::{
    efficiency_report, leavers_in_shards, r1, r1_bounds, r2_bounds, stage1_dfs_order,
    staggered_cost_model, uniform_joins, validate_complexity,
};
use fedshard::engine::TreeShape;
use fedshard::unlearn::{count_cost, one_by_one_cost};

#[test]
fn closed_form_speedup_matches_counts_on_full_trees() {
    for (k, r) in [(8, 2), (16, 2), (9, 3), (16, 4), (64, 2)] {
        let shape = TreeShape::random(k, r, 5, 1).unwrap();
        let report = efficiency_report(&shape, &BTreeSet::from([0])).unwrap();
        assert!((report.measured_r1 - r1(k, r)).abs() < 1e-12, "K={k} R={r}");
        assert_eq!(report.beta, 0.0);
    }
    assert!((r1(8, 2) - 12.0 / 7.0).abs() < 1e-15);
}

#[test]
fn speedup_envelope_and_multi_bounds() {
    let (lo, hi) = r1_bounds(8, 2, 5.0, 4.0, 7.0).unwrap();
    assert!((lo - r1(8, 2) * 5.0 / 7.0).abs() < 1e-12 && (hi - r1(8, 2) * 5.0 / 4.0).abs() < 1e-12);
    assert!(r1_bounds(8, 2, 3.0, 4.0, 7.0).is_err());

    let b = r2_bounds(64, 2, 4, 4).unwrap();
    assert_eq!(b.plus, 4.0);
    assert!((b.minus - 2.0 * (63.0 / 64.0) * 4.0 / 2.0).abs() < 1e-12);
    assert!(!b.inconsistent);
    assert!(r2_bounds(64, 2, 4, 6).is_err());
    assert!(r2_bounds(64, 2, 8, 5).unwrap().inconsistent);
}

#[test]
fn concentrated_leavers_cost_less() {
    let shape = TreeShape::random(64, 2, 5, 3).unwrap();
    assert_eq!(stage1_dfs_order(&shape).len(), 32);
    for m in [2, 4, 8] {
        let mut prev = usize::MAX;
        // stage-1 shards hold two clients each
        for n in m / 2..=m {
            let leavers = leavers_in_shards(&shape, m, n).unwrap();
            assert_eq!(leavers.len(), m);
            let cost = count_cost(&shape, &leavers).paper;
            let serial = one_by_one_cost(&shape, &leavers).paper;
            let r2 = serial as f64 / cost as f64;
            assert!((1.0..=m as f64).contains(&r2), "m={m} n={n} r2={r2}");
            if prev != usize::MAX {
                assert!(cost >= prev, "fewer shards must not cost more");
            }
            prev = cost;
        }
    }
}

#[test]
fn staggered_joins() {
    let joins = uniform_joins(5, 100, 0.5);
    assert_eq!(joins, vec![0, 12, 25, 37, 50]);
    let costs = staggered_cost_model(5, 100, &joins).unwrap();
    assert_eq!(costs[0], 500.0);
    assert_eq!(costs[4], 250.0);
    assert!(staggered_cost_model(5, 100, &[100]).is_err());
}

#[test]
fn complexity_scaling_holds_on_random_trees() {
    let report = validate_complexity(&[16, 32, 64], 2, 5, &[1, 2, 4, 8], 7).unwrap();
    assert!(report.violations.is_empty(), "{:?}", report.violations);
    assert_eq!(report.doubling_ratios.len(), 2);
}
