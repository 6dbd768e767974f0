use std::f64::consts::PI;

use fedshard::adaptive::{merge_shards_a1, random_merge, rounds_from_variances, RoundRange};
use fedshard::datagen::{dirichlet_partition, gen_synthetic, largest_remainder, DataConfig};
use fedshard::fairmetrics::{f_oplus, m_e, m_p_from_values, normalize, uniqueness};
use fedshard::numkit::{angle_between, weighted_mean, ParamVector};
use proptest::prelude::*;

fn vector(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn angle_is_symmetric_and_bounded(u in vector(6), v in vector(6)) {
        let (a, b) = (ParamVector::new(u).unwrap(), ParamVector::new(v).unwrap());
        prop_assume!(a.norm() > 1e-6 && b.norm() > 1e-6);
        let x = angle_between(&a, &b).unwrap();
        let y = angle_between(&b, &a).unwrap();
        prop_assert!((0.0..=PI).contains(&x));
        prop_assert!((x - y).abs() < 1e-12);
        prop_assert!(angle_between(&a, &a).unwrap() < 1e-7);
    }

    #[test]
    fn weighted_mean_is_a_convex_combination(
        rows in prop::collection::vec((0.1f64..5.0, vector(4)), 1..6)
    ) {
        let params: Vec<(f64, ParamVector)> =
            rows.iter().map(|(w, v)| (*w, ParamVector::new(v.clone()).unwrap())).collect();
        let mean = weighted_mean(params.iter().map(|(w, p)| (*w, p))).unwrap();
        for i in 0..4 {
            let lo = rows.iter().map(|r| r.1[i]).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|r| r.1[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(mean.as_slice()[i] >= lo - 1e-9 && mean.as_slice()[i] <= hi + 1e-9);
        }
    }

    #[test]
    fn normalized_values_lie_in_unit_interval(v in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let eps = 1e-6;
        for x in normalize(&v, eps) {
            prop_assert!(x >= eps && x <= 1.0 + eps + 1e-12);
        }
    }

    #[test]
    fn f_oplus_is_at_least_four(x in 1e-6f64..2.0, y in 1e-6f64..2.0) {
        let f = f_oplus(x, y).unwrap();
        prop_assert!(f >= 4.0 - 1e-12);
        prop_assert!((f - f_oplus(y, x).unwrap()).abs() <= 1e-9 * f);
    }

    #[test]
    fn m_p_ignores_units(
        dy in prop::collection::vec(-1.0f64..1.0, 3..12),
        scale_y in 0.01f64..100.0,
        scale_u in 0.01f64..100.0,
        seed in 0u64..1000,
    ) {
        let alphas: Vec<f64> = (0..dy.len()).map(|i| ((seed + i as u64 * 7919) % 997) as f64 / 317.0).collect();
        let remaining: Vec<usize> = (0..dy.len()).collect();
        let u = uniqueness(&alphas, &remaining).unwrap();
        let lo = dy.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = dy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ulo = u.iter().cloned().fold(f64::INFINITY, f64::min);
        let uhi = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assume!(hi - lo > 1e-3 && uhi - ulo > 1e-3);
        let base = m_p_from_values(&dy, &u, 1e-6).unwrap();
        let dy2: Vec<f64> = dy.iter().map(|x| x * scale_y).collect();
        let u2: Vec<f64> = u.iter().map(|x| x * scale_u).collect();
        let scaled = m_p_from_values(&dy2, &u2, 1e-6).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-9 * base.max(1.0));
        prop_assert!(base >= 4.0 - 1e-12);
    }

    #[test]
    fn m_e_vanishes_only_for_equal_costs(costs in prop::collection::vec(0.0f64..50.0, 2..10)) {
        let alphas = vec![0.7; costs.len()];
        let all_equal = costs.iter().all(|&c| c == costs[0]);
        prop_assert_eq!(m_e(&costs, &alphas).unwrap() == 0.0, all_equal);
    }

    #[test]
    fn a2_rounds_stay_in_range_and_are_monotone(
        vars in prop::collection::vec(0.0f64..1.0, 1..12),
        t0 in 1usize..6,
        extra in 0usize..5,
    ) {
        let range = RoundRange { t0_star: t0, t1_star: t0 + extra };
        let rounds = rounds_from_variances(&vars, range);
        for i in 0..vars.len() {
            prop_assert!(rounds[i] >= range.t0_star && rounds[i] <= range.t1_star);
            for j in 0..vars.len() {
                if vars[i] <= vars[j] {
                    prop_assert!(rounds[i] >= rounds[j]);
                }
            }
        }
    }

    #[test]
    fn a1_groups_partition_the_shards(
        alphas in prop::collection::vec(-PI..PI, 2..30),
        r in 2usize..5,
        seed in 0u64..100,
    ) {
        let sizes = vec![1; alphas.len()];
        let plan = merge_shards_a1(&alphas, &sizes, r, seed, 1).unwrap();
        prop_assert!(plan.check(alphas.len(), r).is_ok());
        prop_assert_eq!(plan.groups.len(), alphas.len().div_ceil(r));
        let again = merge_shards_a1(&alphas, &sizes, r, seed, 1).unwrap();
        prop_assert_eq!(plan, again);
        let random = random_merge(alphas.len(), r, seed, 1);
        prop_assert!(random.check(alphas.len(), r).is_ok());
    }

    #[test]
    fn largest_remainder_hits_the_total(total in 0usize..500, w in prop::collection::vec(0.0f64..1.0, 1..10)) {
        prop_assume!(w.iter().sum::<f64>() > 1e-6);
        prop_assert_eq!(largest_remainder(total, &w).iter().sum::<usize>(), total);
    }

    #[test]
    fn dirichlet_partition_conserves_samples(k in 2usize..10, conc in 0.05f64..20.0, seed in 0u64..50) {
        let config = DataConfig { seed, ..DataConfig::default() };
        let data = gen_synthetic(&config, 20 * k).unwrap();
        let parts = dirichlet_partition(&data, k, conc, seed).unwrap();
        prop_assert_eq!(parts.len(), k);
        prop_assert_eq!(parts.iter().map(|p| p.len()).sum::<usize>(), data.len());
        let mut hist = vec![0; config.num_labels];
        for p in &parts {
            for (h, x) in hist.iter_mut().zip(p.label_histogram(config.num_labels)) {
                *h += x;
            }
        }
        prop_assert_eq!(hist, data.label_histogram(config.num_labels));
    }
}
