//! Experiment harnesses: cascaded leaving, poisoning through unlearning,
//! the flat retraining baseline and a deliberately unfair unlearner.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::adaptive::RoundRange;
use crate::datagen::{build_label_groups, ClientData, DataConfig, GroupedPopulation};
use crate::engine::{
    retrain_with_structure, run_training, train_shard, FlCache, MergePolicy, RoundPolicy,
    RunConfig, ShardKey,
};
use crate::error::{Error, Result};
use crate::fairmetrics::{self, FairnessInputs, DEFAULT_EPSILON};
use crate::numkit::{self, loss_and_grad, Dataset, LocalTrainConfig, ModelSpec, ParamVector};
use crate::unlearn::{count_cost, unlearn};

/// Leave-or-stay rule for a remaining client: leave iff
/// `delta_y > y_star - cost_scale * z`, where `y_star` is the client's own
/// post-unlearning accuracy and `z` its prospective unlearning cost divided
/// by the largest such cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayoffParams {
    pub cost_scale: f64,
}

impl Default for PayoffParams {
    fn default() -> Self {
        PayoffParams { cost_scale: 0.1 }
    }
}

impl PayoffParams {
    pub fn leaves(&self, delta_y: f64, y_star: f64, z: f64) -> bool {
        delta_y > y_star - self.cost_scale * z
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Unlearner {
    Exact,
    /// Exact removal followed by `gamma` gradient-ascent steps of size `lr`.
    Mock {
        gamma: usize,
        lr: f64,
    },
}

/// Cosine similarity of label histograms.
fn histogram_cosine(a: &[usize], b: &[usize]) -> f64 {
    let dot: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (*x as f64) * (*y as f64))
        .sum();
    let na = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Remaining clients whose training label mix is close to the leavers'
/// pooled mix (cosine at least 0.5).
pub fn leaver_similar_clients(
    clients: &[ClientData],
    leavers: &BTreeSet<usize>,
    num_labels: usize,
) -> Vec<usize> {
    let mut pooled = vec![0usize; num_labels];
    for &c in leavers {
        for (p, h) in pooled
            .iter_mut()
            .zip(clients[c].train.label_histogram(num_labels))
        {
            *p += h;
        }
    }
    clients
        .iter()
        .filter(|c| !leavers.contains(&c.client_id))
        .filter(|c| histogram_cosine(&c.train.label_histogram(num_labels), &pooled) >= 0.5)
        .map(|c| c.client_id)
        .collect()
}

/// Over-forgetting stand-in: from the exactly unlearned model, ascends the
/// training loss on the leavers' data and on the data of remaining clients
/// that resemble them, for `gamma` steps.
pub fn mock_unfair_unlearner(
    exact: &ParamVector,
    cache: &FlCache,
    clients: &[ClientData],
    leavers: &BTreeSet<usize>,
    gamma: usize,
    lr: f64,
) -> Result<ParamVector> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid("ascent step must be finite and >= 0"));
    }
    if gamma == 0 {
        return Ok(exact.clone());
    }
    let spec = &cache.config.model;
    let mut target = Dataset::empty(spec.input_dim);
    let similar = leaver_similar_clients(clients, leavers, spec.num_labels);
    for &c in leavers.iter().chain(&similar) {
        target.extend(&clients[c].train);
    }
    let mut theta = exact.as_slice().to_vec();
    for _ in 0..gamma {
        let current = ParamVector::new(theta.clone())?;
        let (_, g) = loss_and_grad(&current, &target, spec)?;
        for (t, gi) in theta.iter_mut().zip(g.as_slice()) {
            *t += lr * gi;
        }
    }
    ParamVector::new(theta).map_err(|_| Error::Diverged(format!("{gamma} ascent steps")))
}

/// Accuracy of `model` on each client's own held-out data.
pub fn own_accuracy(
    model: &ParamVector,
    clients: &[ClientData],
    cache: &FlCache,
) -> Result<Vec<f64>> {
    clients
        .iter()
        .map(|c| Ok(numkit::evaluate(model, &c.test, &cache.config.model)?.accuracy))
        .collect()
}

fn apply_unlearner(
    cache: &FlCache,
    clients: &[ClientData],
    leavers: &BTreeSet<usize>,
    unlearner: Unlearner,
) -> Result<(ParamVector, ParamVector)> {
    let ids: Vec<usize> = leavers.iter().copied().collect();
    let exact = unlearn(cache, clients, &ids)?.cache.final_model().clone();
    let post = match unlearner {
        Unlearner::Exact => exact.clone(),
        Unlearner::Mock { gamma, lr } => {
            mock_unfair_unlearner(&exact, cache, clients, leavers, gamma, lr)?
        }
    };
    Ok((exact, post))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeReport {
    pub initial_leavers: Vec<usize>,
    pub pre_accuracy: Vec<f64>,
    pub post_accuracy: Vec<f64>,
    pub delta_y: Vec<f64>,
    /// Remaining clients that choose to leave.
    pub cascaded: Vec<usize>,
    pub leaver_count: usize,
    pub m_p: f64,
    pub m_e: f64,
    pub exact_digest: String,
    pub model_digest: String,
}

/// Removes `initial_leavers`, then lets every remaining client decide
/// whether to follow them.
pub fn run_cascade(
    cache: &FlCache,
    clients: &[ClientData],
    initial_leavers: &[usize],
    payoff: PayoffParams,
    unlearner: Unlearner,
) -> Result<CascadeReport> {
    let pre = own_accuracy(cache.final_model(), clients, cache)?;
    let leavers: BTreeSet<usize> = initial_leavers.iter().copied().collect();
    if leavers.is_empty() {
        return Ok(CascadeReport {
            initial_leavers: Vec::new(),
            post_accuracy: pre.clone(),
            delta_y: vec![0.0; pre.len()],
            pre_accuracy: pre,
            cascaded: Vec::new(),
            leaver_count: 0,
            m_p: f64::NAN,
            m_e: f64::NAN,
            exact_digest: cache.final_model().digest(),
            model_digest: cache.final_model().digest(),
        });
    }
    let (exact, post_model) = apply_unlearner(cache, clients, &leavers, unlearner)?;
    let post = own_accuracy(&post_model, clients, cache)?;
    let delta_y: Vec<f64> = pre.iter().zip(&post).map(|(a, b)| a - b).collect();
    let shape = cache.shape();
    let costs: Vec<f64> = (0..clients.len())
        .map(|c| count_cost(&shape, &BTreeSet::from([c])).paper as f64)
        .collect();
    let max_cost = costs
        .iter()
        .cloned()
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let remaining: Vec<usize> = (0..clients.len())
        .filter(|c| !leavers.contains(c))
        .collect();
    let cascaded: Vec<usize> = remaining
        .iter()
        .copied()
        .filter(|&c| payoff.leaves(delta_y[c], post[c], costs[c] / max_cost))
        .collect();
    let inputs = FairnessInputs {
        delta_y: delta_y.clone(),
        alphas: cache.client_alphas.clone(),
        remaining,
        costs,
        epsilon: DEFAULT_EPSILON,
    };
    let fair = fairmetrics::report(&inputs)?;
    Ok(CascadeReport {
        initial_leavers: leavers.into_iter().collect(),
        pre_accuracy: pre,
        post_accuracy: post,
        delta_y,
        leaver_count: cascaded.len(),
        cascaded,
        m_p: fair.m_p,
        m_e: fair.m_e,
        exact_digest: exact.digest(),
        model_digest: post_model.digest(),
    })
}

pub const DEFAULT_TAU: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpaReport {
    pub attackers: Vec<usize>,
    pub tau: f64,
    pub reference_accuracy: Vec<f64>,
    pub post_accuracy: Vec<f64>,
    pub poisoned: Vec<usize>,
    /// Poisoned clients over all clients.
    pub precision: f64,
    pub m_p: f64,
    pub reference_digest: String,
    pub exact_digest: String,
    pub model_digest: String,
}

/// Attackers join, train, then all request removal. A remaining client
/// counts as poisoned when its accuracy under the unlearned model falls more
/// than `tau` below its accuracy under a model that never saw the attackers
/// (same tree, rounds and seeds).
pub fn run_dpa(
    cache: &FlCache,
    clients: &[ClientData],
    attackers: &[usize],
    tau: f64,
    unlearner: Unlearner,
) -> Result<DpaReport> {
    let set: BTreeSet<usize> = attackers.iter().copied().collect();
    if set.is_empty() {
        return Err(Error::invalid("the attack needs at least one attacker"));
    }
    let reference = retrain_with_structure(cache, clients, &set)?;
    let reference_model = reference.final_model();
    let (exact, post_model) = apply_unlearner(cache, clients, &set, unlearner)?;
    let ref_acc = own_accuracy(reference_model, clients, cache)?;
    let post_acc = own_accuracy(&post_model, clients, cache)?;
    let pre_acc = own_accuracy(cache.final_model(), clients, cache)?;
    let remaining: Vec<usize> = (0..clients.len()).filter(|c| !set.contains(c)).collect();
    let poisoned: Vec<usize> = remaining
        .iter()
        .copied()
        .filter(|&c| post_acc[c] < ref_acc[c] - tau)
        .collect();
    let delta_y: Vec<f64> = pre_acc.iter().zip(&post_acc).map(|(a, b)| a - b).collect();
    let uniq = fairmetrics::uniqueness(&cache.client_alphas, &remaining)?;
    let m_p = fairmetrics::m_p_from_values(&delta_y, &uniq, DEFAULT_EPSILON)?;
    Ok(DpaReport {
        attackers: set.into_iter().collect(),
        tau,
        reference_accuracy: ref_acc,
        post_accuracy: post_acc,
        precision: poisoned.len() as f64 / clients.len() as f64,
        poisoned,
        m_p,
        reference_digest: reference_model.digest(),
        exact_digest: exact.digest(),
        model_digest: post_model.digest(),
    })
}

/// Desk-scale run shared by the scenario fixtures: softmax regression on 8
/// features and 6 labels, 80 samples per client, binary merging with
/// adaptive rounds in `[4, 7]` and 5 full-batch steps of size 0.5 per round.
pub fn desk_config(num_clients: usize, concentration: f64, seed: u64) -> RunConfig {
    RunConfig {
        num_clients,
        merge_rate: 2,
        rounds: RoundPolicy::Adaptive {
            range: RoundRange::default(),
        },
        merge: MergePolicy::Directional,
        model: ModelSpec::linear(8, 6),
        data: DataConfig {
            num_labels: 6,
            samples_per_client: 80,
            concentration,
            seed,
            ..DataConfig::default()
        },
        local: LocalTrainConfig::full_batch(5, 0.5),
        master_seed: seed,
    }
}

/// A run over the two-label-group population: `majority` clients on one
/// label group, `minority` on the other.
pub fn grouped_training(
    config: &RunConfig,
    majority: usize,
    minority: usize,
) -> Result<(FlCache, GroupedPopulation)> {
    if config.num_clients != majority + minority {
        return Err(Error::Config(
            "num_clients must equal majority + minority".into(),
        ));
    }
    let population = build_label_groups(&config.data, majority, minority)?;
    let cache = run_training(config, &population.clients)?;
    Ok((cache, population))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub survivors: Vec<usize>,
    pub rounds: usize,
    /// Rounds times all `K` clients.
    pub paper_client_rounds: usize,
    /// Rounds times the surviving clients.
    pub actual_client_rounds: usize,
    pub model_digest: String,
}

/// Flat FedAvg over `survivors` from the initial model. `rounds` defaults to
/// the per-client training rounds of the sharded run (`P T0` for fixed rounds).
pub fn scratch_retrain_baseline(
    cache: &FlCache,
    clients: &[ClientData],
    survivors: &[usize],
    rounds: Option<usize>,
) -> Result<(ParamVector, BaselineReport)> {
    if survivors.is_empty() {
        return Err(Error::invalid(
            "the baseline needs at least one surviving client",
        ));
    }
    let mut ids = survivors.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let k = cache.num_clients();
    let rounds = rounds.unwrap_or_else(|| cache.shape().training_client_rounds().div_ceil(k));
    let key = ShardKey {
        master_seed: cache.config.master_seed,
        stage: 0,
        index: 0,
    };
    let trained = train_shard(
        &cache.theta0,
        &ids,
        clients,
        rounds,
        key,
        &cache.config.local,
        &cache.config.model,
    )?;
    let report = BaselineReport {
        rounds,
        paper_client_rounds: rounds * k,
        actual_client_rounds: rounds * ids.len(),
        model_digest: trained.theta_final.digest(),
        survivors: ids,
    };
    Ok((trained.theta_final, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payoff_rule() {
        let p = PayoffParams::default();
        assert!(!p.leaves(0.0, 0.9, 1.0));
        assert!(p.leaves(0.6, 0.3, 0.0));
        assert!(!p.leaves(0.25, 0.3, 0.0));
        assert!(p.leaves(0.25, 0.3, 1.0));
    }

    #[test]
    fn cosine_of_histograms() {
        assert_eq!(histogram_cosine(&[1, 0], &[0, 3]), 0.0);
        assert!((histogram_cosine(&[2, 2], &[1, 1]) - 1.0).abs() < 1e-15);
        assert_eq!(histogram_cosine(&[0, 0], &[1, 1]), 0.0);
    }
}
