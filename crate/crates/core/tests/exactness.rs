mod common;

use std::collections::BTreeSet;

use common::{caches_bit_equal, clients_for, sequential_retrain, small_config};
use fedshard::engine::{retrain_with_structure, run_training, MergePolicy};
use fedshard::unlearn::{count_cost, unlearn, unlearn_multi};
use fedshard::Error;

#[test]
fn unlearn_matches_sequential_oracle() {
    for (k, r) in [(8, 2), (9, 3), (16, 4)] {
        let config = small_config(k, r, 11);
        let clients = clients_for(&config);
        let cache = run_training(&config, &clients).unwrap();
        let shape = cache.shape();
        let full = sequential_retrain(&shape, &cache.theta0, &clients, &BTreeSet::new(), &config);
        assert!(
            full.bit_eq(cache.final_model()),
            "training run differs from oracle at K={k}, R={r}"
        );
        for c in [0, k / 2, k - 1] {
            let out = unlearn(&cache, &clients, &[c]).unwrap();
            let oracle = sequential_retrain(
                &shape,
                &cache.theta0,
                &clients,
                &BTreeSet::from([c]),
                &config,
            );
            assert!(
                out.cache.final_model().bit_eq(&oracle),
                "K={k} R={r} client {c}"
            );
        }
    }
}

#[test]
fn every_shard_matches_structured_rerun() {
    let config = small_config(8, 2, 3);
    let clients = clients_for(&config);
    let cache = run_training(&config, &clients).unwrap();
    for c in 0..8 {
        let out = unlearn(&cache, &clients, &[c]).unwrap();
        let scratch = retrain_with_structure(&cache, &clients, &BTreeSet::from([c])).unwrap();
        assert!(caches_bit_equal(&out.cache, &scratch), "client {c}");
        assert_eq!(out.cache.removed, vec![c]);
        assert!(!out.cache.remaining_clients().contains(&c));
    }
}

#[test]
fn simultaneous_and_sequential_removal() {
    let config = small_config(16, 2, 5);
    let clients = clients_for(&config);
    let cache = run_training(&config, &clients).unwrap();
    let both = BTreeSet::from([2, 13]);
    let scratch = retrain_with_structure(&cache, &clients, &both).unwrap();

    let multi = unlearn_multi(&cache, &clients, &[13, 2]).unwrap();
    assert!(caches_bit_equal(&multi.cache, &scratch));

    let first = unlearn(&cache, &clients, &[2]).unwrap();
    let second = unlearn(&first.cache, &clients, &[13]).unwrap();
    assert!(caches_bit_equal(&second.cache, &scratch));
    assert_eq!(second.cache.removed, vec![2, 13]);
}

#[test]
fn only_the_leaver_path_is_retrained() {
    let config = small_config(16, 2, 8);
    let clients = clients_for(&config);
    let cache = run_training(&config, &clients).unwrap();
    let shape = cache.shape();
    let out = unlearn(&cache, &clients, &[6]).unwrap();
    for work in &out.ledger.stages {
        assert_eq!(work.trained.len(), 1, "stage {}", work.stage);
        let node = &shape.stages[work.stage - 1][work.trained[0]];
        assert!(node.clients.contains(&6));
    }
    let counted = count_cost(&shape, &BTreeSet::from([6]));
    assert_eq!(out.ledger.paper_client_rounds, counted.paper);
    assert_eq!(out.ledger.actual_client_rounds, counted.actual);
    for (p, nodes) in cache.stages.iter().enumerate().skip(1) {
        for old in nodes.iter().filter(|n| !n.client_ids.contains(&6)) {
            let new = out.cache.shard(p, old.index).unwrap();
            assert!(new.theta_final.bit_eq(&old.theta_final));
        }
    }
}

#[test]
fn emptied_shards_are_dropped() {
    let config = small_config(8, 2, 2);
    let clients = clients_for(&config);
    let cache = run_training(&config, &clients).unwrap();
    let pair = cache.stages[1][0].client_ids.clone();
    let out = unlearn(&cache, &clients, &pair).unwrap();
    assert!(out.cache.shard(1, 0).is_none());
    assert_eq!(out.ledger.stages[0].dropped, vec![0]);
    let scratch =
        retrain_with_structure(&cache, &clients, &pair.iter().copied().collect()).unwrap();
    assert!(caches_bit_equal(&out.cache, &scratch));
}

#[test]
fn random_merging_is_also_exact() {
    let mut config = small_config(12, 3, 4);
    config.merge = MergePolicy::Random;
    let clients = clients_for(&config);
    let cache = run_training(&config, &clients).unwrap();
    let out = unlearn(&cache, &clients, &[7]).unwrap();
    let oracle = sequential_retrain(
        &cache.shape(),
        &cache.theta0,
        &clients,
        &BTreeSet::from([7]),
        &config,
    );
    assert!(out.cache.final_model().bit_eq(&oracle));
}

#[test]
fn schedule_independence() {
    let config = small_config(16, 2, 9);
    let clients = clients_for(&config);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                let cache = run_training(&config, &clients).unwrap();
                let out = unlearn(&cache, &clients, &[4, 11]).unwrap();
                (cache, out.cache)
            })
    };
    let (a, ua) = run(1);
    let (b, ub) = run(4);
    assert!(caches_bit_equal(&a, &b));
    assert!(caches_bit_equal(&ua, &ub));
    assert_eq!(a.client_alphas, b.client_alphas);
}

#[test]
fn bad_requests_are_rejected() {
    let config = small_config(8, 2, 1);
    let clients = clients_for(&config);
    let cache = run_training(&config, &clients).unwrap();
    for leavers in [vec![], vec![8], vec![1, 1], (0..8).collect::<Vec<_>>()] {
        assert!(
            matches!(unlearn(&cache, &clients, &leavers), Err(Error::Request(_))),
            "{leavers:?}"
        );
    }
    assert!(matches!(
        unlearn_multi(&cache, &clients, &[3]),
        Err(Error::Request(_))
    ));
    let gone = unlearn(&cache, &clients, &[3]).unwrap().cache;
    assert!(matches!(
        unlearn(&gone, &clients, &[3]),
        Err(Error::Request(_))
    ));
}
