//! Client removal by retraining only the shards on the leavers' paths.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datagen::ClientData;
use crate::engine::{replay, FlCache, StageWork, TreeShape};
use crate::error::{Error, Result};

/// Checks a removal request against the clients still present in `cache`.
pub fn validate_request(cache: &FlCache, leavers: &[usize]) -> Result<BTreeSet<usize>> {
    if leavers.is_empty() {
        return Err(Error::Request("no clients named".into()));
    }
    let remaining: BTreeSet<usize> = cache.remaining_clients().into_iter().collect();
    let mut set = BTreeSet::new();
    for &c in leavers {
        if !set.insert(c) {
            return Err(Error::Request(format!("client {c} listed more than once")));
        }
        if !remaining.contains(&c) {
            return Err(Error::Request(format!(
                "client {c} is not in the federation"
            )));
        }
    }
    if set.len() >= remaining.len() {
        return Err(Error::Request("at least one client must remain".into()));
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffectedStage {
    pub stage: usize,
    pub shards: Vec<usize>,
}

/// Shards of stages `1..=P` whose client set meets the leaving set.
pub fn find_affected(cache: &FlCache, leavers: &[usize]) -> Result<Vec<AffectedStage>> {
    let set = validate_request(cache, leavers)?;
    Ok(affected_in_shape(&cache.shape(), &set))
}

fn affected_in_shape(shape: &TreeShape, leavers: &BTreeSet<usize>) -> Vec<AffectedStage> {
    shape
        .stages
        .iter()
        .enumerate()
        .map(|(i, nodes)| AffectedStage {
            stage: i + 1,
            shards: nodes
                .iter()
                .filter(|n| n.clients.iter().any(|c| leavers.contains(c)))
                .map(|n| n.index)
                .collect(),
        })
        .collect()
}

/// Last stage at which some shard holds none of the leavers.
pub fn p_prime(shape: &TreeShape, leavers: &BTreeSet<usize>) -> usize {
    shape
        .stages
        .iter()
        .enumerate()
        .filter(|(_, nodes)| {
            nodes
                .iter()
                .any(|n| !n.clients.iter().any(|c| leavers.contains(c)))
        })
        .map(|(i, _)| i + 1)
        .max()
        .unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub leavers: Vec<usize>,
    pub stages: Vec<StageWork>,
    /// Affected shards counted at their size before removal.
    pub paper_client_rounds: usize,
    /// Client-rounds actually trained.
    pub actual_client_rounds: usize,
    pub wall_clock_secs: f64,
    pub p_prime: usize,
}

#[derive(Clone, Debug)]
pub struct UnlearnOutcome {
    pub cache: FlCache,
    pub ledger: CostLedger,
}

/// Removes `leavers` from the federation.
///
/// Shards without a leaver keep their cached models; shards with one are
/// retrained from their surviving children, with their cached round count
/// and their original RNG keys. Shards left without clients are dropped.
pub fn unlearn(
    cache: &FlCache,
    clients: &[ClientData],
    leavers: &[usize],
) -> Result<UnlearnOutcome> {
    let set = validate_request(cache, leavers)?;
    let mut excluded: BTreeSet<usize> = cache.removed.iter().copied().collect();
    excluded.extend(set.iter().copied());
    let shape = cache.shape();
    let start = Instant::now();
    let (updated, stages) = replay(&cache.config, &shape, clients, &excluded, Some(cache))?;
    let ledger = CostLedger {
        leavers: set.iter().copied().collect(),
        paper_client_rounds: stages.iter().map(|s| s.paper_client_rounds).sum(),
        actual_client_rounds: stages.iter().map(|s| s.actual_client_rounds).sum(),
        stages,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        p_prime: p_prime(&shape, &set),
    };
    Ok(UnlearnOutcome {
        cache: updated,
        ledger,
    })
}

/// Simultaneous removal of two or more clients.
pub fn unlearn_multi(
    cache: &FlCache,
    clients: &[ClientData],
    leavers: &[usize],
) -> Result<UnlearnOutcome> {
    if leavers.len() < 2 {
        return Err(Error::Request(
            "a simultaneous request names at least two clients".into(),
        ));
    }
    unlearn(cache, clients, leavers)
}

/// Paper-mode and actual client-rounds of removing `leavers`, from the tree alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountedCost {
    pub paper: usize,
    pub actual: usize,
}

pub fn count_cost(shape: &TreeShape, leavers: &BTreeSet<usize>) -> CountedCost {
    let mut cost = CountedCost {
        paper: 0,
        actual: 0,
    };
    for n in shape.stages.iter().flatten() {
        let gone = n.clients.iter().filter(|c| leavers.contains(c)).count();
        if gone > 0 {
            cost.paper += n.rounds * n.clients.len();
            cost.actual += n.rounds * (n.clients.len() - gone);
        }
    }
    cost
}

/// Sum of single-leaver costs on the original tree.
pub fn one_by_one_cost(shape: &TreeShape, leavers: &BTreeSet<usize>) -> CountedCost {
    leavers.iter().fold(
        CountedCost {
            paper: 0,
            actual: 0,
        },
        |acc, &c| {
            let one = count_cost(shape, &BTreeSet::from([c]));
            CountedCost {
                paper: acc.paper + one.paper,
                actual: acc.actual + one.actual,
            }
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientCost {
    pub client: usize,
    pub paper: usize,
    pub actual: usize,
    /// Seconds spent retraining; only measured in full-retrain sweeps.
    pub wall_clock_secs: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    CountOnly,
    FullRetrain,
}

/// Single-leaver cost of every remaining client.
pub fn sweep_all_single_costs(
    cache: &FlCache,
    clients: &[ClientData],
    mode: SweepMode,
) -> Result<Vec<ClientCost>> {
    let shape = cache.shape();
    cache
        .remaining_clients()
        .into_iter()
        .map(|c| {
            let counted = count_cost(&shape, &BTreeSet::from([c]));
            let wall_clock_secs = match mode {
                SweepMode::CountOnly => None,
                SweepMode::FullRetrain => {
                    Some(unlearn(cache, clients, &[c])?.ledger.wall_clock_secs)
                }
            };
            Ok(ClientCost {
                client: c,
                paper: counted.paper,
                actual: counted.actual,
                wall_clock_secs,
            })
        })
        .collect()
}

/// Count-only sweep over a bare tree shape.
pub fn sweep_shape_costs(shape: &TreeShape) -> BTreeMap<usize, CountedCost> {
    (0..shape.num_clients)
        .map(|c| (c, count_cost(shape, &BTreeSet::from([c]))))
        .collect()
}

pub fn z_avg(costs: &[f64]) -> f64 {
    costs.iter().sum::<f64>() / costs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::TreeShape;

    #[test]
    fn balanced_tree_costs() {
        let shape = TreeShape::random(8, 2, 5, 3).unwrap();
        for (_, cost) in sweep_shape_costs(&shape) {
            assert_eq!(cost.paper, 5 * (2 + 4 + 8));
            assert_eq!(cost.actual, 5 * (1 + 3 + 7));
        }
    }

    #[test]
    fn shared_and_opposite_pairs() {
        let shape = TreeShape::random(8, 2, 1, 3).unwrap();
        let pair = &shape.stages[0][0].clients;
        let same: BTreeSet<usize> = pair.iter().copied().collect();
        assert_eq!(count_cost(&shape, &same).paper, 14);
        let left = shape.stages[1][0].clients[0];
        let right = shape.stages[1][1].clients[0];
        let opposite = BTreeSet::from([left, right]);
        assert_eq!(count_cost(&shape, &opposite).paper, 2 * 2 + 2 * 4 + 8);
        assert_eq!(p_prime(&shape, &opposite), 1);
        assert_eq!(p_prime(&shape, &same), 2);
    }
}
