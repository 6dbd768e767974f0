mod common;

use std::collections::BTreeSet;

use common::{clients_for, median, small_config};
use fedshard::engine::{run_training, RoundPolicy};
use fedshard::scenarios::{
    desk_config, grouped_training, leaver_similar_clients, run_cascade, run_dpa,
    scratch_retrain_baseline, PayoffParams, Unlearner, DEFAULT_TAU,
};
use fedshard::unlearn::unlearn;

#[test]
fn zero_gamma_mock_is_exact() {
    let (cache, pop) = grouped_training(&desk_config(8, 0.5, 1), 6, 2).unwrap();
    let exact = run_cascade(
        &cache,
        &pop.clients,
        &[6],
        PayoffParams::default(),
        Unlearner::Exact,
    )
    .unwrap();
    let mock = run_cascade(
        &cache,
        &pop.clients,
        &[6],
        PayoffParams::default(),
        Unlearner::Mock { gamma: 0, lr: 0.1 },
    )
    .unwrap();
    assert_eq!(exact.model_digest, mock.model_digest);
    assert_eq!(exact.exact_digest, exact.model_digest);
    assert_eq!(exact.delta_y, mock.delta_y);
}

#[test]
fn no_initial_leavers_means_no_cascade() {
    let (cache, pop) = grouped_training(&desk_config(8, 0.5, 2), 6, 2).unwrap();
    let report = run_cascade(
        &cache,
        &pop.clients,
        &[],
        PayoffParams::default(),
        Unlearner::Exact,
    )
    .unwrap();
    assert_eq!(report.leaver_count, 0);
    assert!(report.delta_y.iter().all(|&d| d == 0.0));
}

#[test]
fn exact_dpa_matches_the_reference_bit_for_bit() {
    let (cache, pop) = grouped_training(&desk_config(8, 0.5, 3), 6, 2).unwrap();
    let report = run_dpa(
        &cache,
        &pop.clients,
        &pop.minority_ids,
        DEFAULT_TAU,
        Unlearner::Exact,
    )
    .unwrap();
    assert_eq!(report.precision, 0.0);
    assert_eq!(report.reference_digest, report.model_digest);
    let unreachable = run_dpa(
        &cache,
        &pop.clients,
        &pop.minority_ids,
        1.0,
        Unlearner::Mock { gamma: 50, lr: 0.1 },
    )
    .unwrap();
    assert_eq!(unreachable.precision, 0.0);
}

#[test]
fn similar_clients_share_the_leavers_labels() {
    let pop = fedshard::datagen::build_label_groups(&desk_config(16, 5.0, 4).data, 12, 4).unwrap();
    let similar = leaver_similar_clients(&pop.clients, &BTreeSet::from([12]), 6);
    assert_eq!(similar, vec![13, 14, 15]);
}

#[test]
fn victim_damage_grows_with_gamma() {
    let gammas = [0, 5, 20, 60];
    let mut per_gamma = vec![Vec::new(); gammas.len()];
    for seed in 1..=5 {
        let (cache, pop) = grouped_training(&desk_config(16, 0.5, seed), 12, 4).unwrap();
        let leavers = [12];
        let victims: Vec<usize> = vec![13, 14, 15];
        for (i, &gamma) in gammas.iter().enumerate() {
            let r = run_cascade(
                &cache,
                &pop.clients,
                &leavers,
                PayoffParams::default(),
                Unlearner::Mock { gamma, lr: 0.1 },
            )
            .unwrap();
            per_gamma[i]
                .push(victims.iter().map(|&v| r.delta_y[v]).sum::<f64>() / victims.len() as f64);
        }
    }
    let medians: Vec<f64> = per_gamma.into_iter().map(median).collect();
    assert!(medians.windows(2).all(|w| w[0] <= w[1]), "{medians:?}");
}

#[test]
fn baseline_costs() {
    let mut config = small_config(8, 2, 6);
    config.rounds = RoundPolicy::Fixed { t0: 3 };
    let clients = clients_for(&config);
    let cache = run_training(&config, &clients).unwrap();
    let all: Vec<usize> = (0..8).collect();
    let (_, full) = scratch_retrain_baseline(&cache, &clients, &all, None).unwrap();
    assert_eq!(full.rounds, 3 * 3);
    assert_eq!(full.actual_client_rounds, 3 * 3 * 8);

    let survivors: Vec<usize> = (1..8).collect();
    let (_, base) = scratch_retrain_baseline(&cache, &clients, &survivors, None).unwrap();
    let sharded = unlearn(&cache, &clients, &[0]).unwrap().ledger;
    let ratio = base.paper_client_rounds as f64 / sharded.paper_client_rounds as f64;
    assert!((ratio - 12.0 / 7.0).abs() < 1e-12, "{ratio}");
    assert!(scratch_retrain_baseline(&cache, &clients, &[], None).is_err());
}
