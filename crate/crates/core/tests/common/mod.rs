#![allow(dead_code)]

use std::collections::BTreeSet;

use fedshard::adaptive::RoundRange;
use fedshard::datagen::{build_clients, ClientData, DataConfig};
use fedshard::engine::{FlCache, MergePolicy, RoundPolicy, RunConfig, TreeShape};
use fedshard::numkit::{local_train, weighted_mean, LocalTrainConfig, ModelSpec, ParamVector};

/// A small, fast run: softmax regression on 4 features and 3 labels.
pub fn small_config(k: usize, r: usize, seed: u64) -> RunConfig {
    RunConfig {
        num_clients: k,
        merge_rate: r,
        rounds: RoundPolicy::Adaptive {
            range: RoundRange {
                t0_star: 2,
                t1_star: 4,
            },
        },
        merge: MergePolicy::Directional,
        model: ModelSpec::linear(4, 3),
        data: DataConfig {
            input_dim: 4,
            num_labels: 3,
            samples_per_client: 24,
            seed,
            ..DataConfig::default()
        },
        local: LocalTrainConfig::full_batch(2, 0.3),
        master_seed: seed,
    }
}

pub fn clients_for(config: &RunConfig) -> Vec<ClientData> {
    build_clients(&config.data, config.num_clients).unwrap()
}

/// Plain sequential retraining of a tree shape without `excluded`, written
/// against the numkit primitives only. Valid for full-batch local training,
/// where local steps draw no randomness.
pub fn sequential_retrain(
    shape: &TreeShape,
    theta0: &ParamVector,
    clients: &[ClientData],
    excluded: &BTreeSet<usize>,
    config: &RunConfig,
) -> ParamVector {
    // (index, weight, model) of the shards alive at the previous stage
    let mut prev: Vec<(usize, f64, ParamVector)> = (0..shape.num_clients)
        .filter(|c| !excluded.contains(c))
        .map(|c| (c, 1.0, theta0.clone()))
        .collect();
    for stage in &shape.stages {
        let mut next = Vec::new();
        for node in stage {
            let survivors: Vec<usize> = node
                .clients
                .iter()
                .copied()
                .filter(|c| !excluded.contains(c))
                .collect();
            if survivors.is_empty() {
                continue;
            }
            let kids: Vec<&(usize, f64, ParamVector)> = node
                .children
                .iter()
                .filter_map(|c| prev.iter().find(|(i, _, _)| i == c))
                .collect();
            let weight: f64 = kids.iter().map(|k| k.1).sum();
            let mut theta = weighted_mean(kids.iter().map(|k| (k.1, &k.2))).unwrap();
            for _ in 0..node.rounds {
                let locals: Vec<(f64, ParamVector)> = survivors
                    .iter()
                    .map(|&c| {
                        let data = &clients[c].train;
                        (
                            data.len() as f64,
                            local_train(&theta, data, &config.local, &config.model, 0).unwrap(),
                        )
                    })
                    .collect();
                theta = weighted_mean(locals.iter().map(|(w, p)| (*w, p))).unwrap();
            }
            next.push((node.index, weight, theta));
        }
        prev = next;
    }
    assert_eq!(prev.len(), 1, "replay must end in one root shard");
    prev.pop().unwrap().2
}

/// Every shard model of `a` and `b` agrees bit for bit.
pub fn caches_bit_equal(a: &FlCache, b: &FlCache) -> bool {
    a.stages.len() == b.stages.len()
        && a.stages.iter().zip(&b.stages).all(|(x, y)| {
            x.len() == y.len()
                && x.iter().zip(y).all(|(m, n)| {
                    m.index == n.index
                        && m.client_ids == n.client_ids
                        && m.theta_init.bit_eq(&n.theta_init)
                        && m.theta_final.bit_eq(&n.theta_final)
                })
        })
}

pub fn median(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty());
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
