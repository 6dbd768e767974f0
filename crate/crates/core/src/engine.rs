//! Staged sharded training and its persisted cache.
//!
//! Stage 0 holds one singleton shard per client, all carrying the shared
//! initial model. Each later stage merges up to `R` shards of the previous
//! stage, starts every new shard from the weighted average of its children,
//! and runs FedAvg among the shard's clients. The run ends with a single root
//! shard that contains every client.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptive::{self, MergePlan, RoundRange};
use crate::datagen::{ClientData, DataConfig};
use crate::error::{Error, Result};
use crate::numkit::{
    self, angle_between, init_params, local_train, loss_and_grad, weighted_mean, Dataset,
    EvalReport, LocalTrainConfig, ModelSpec, ParamVector,
};
use crate::rng;

pub const CACHE_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOBS: &str = "params.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RoundPolicy {
    Fixed { t0: usize },
    Adaptive { range: RoundRange },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergePolicy {
    /// Cluster shards by signed contribution angle and mix directions.
    Directional,
    /// Seeded random groups at every stage.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub num_clients: usize,
    pub merge_rate: usize,
    pub rounds: RoundPolicy,
    pub merge: MergePolicy,
    pub model: ModelSpec,
    pub data: DataConfig,
    pub local: LocalTrainConfig,
    pub master_seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients < 2 {
            return Err(Error::Config("num_clients must be >= 2".into()));
        }
        if self.merge_rate < 2 {
            return Err(Error::Config("merge_rate must be >= 2".into()));
        }
        match self.rounds {
            RoundPolicy::Fixed { t0: 0 } => {
                return Err(Error::Config("fixed rounds must be >= 1".into()));
            }
            RoundPolicy::Adaptive { range } => range.validate()?,
            _ => {}
        }
        self.model
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.local
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.data.validate()?;
        if self.data.input_dim != self.model.input_dim
            || self.data.num_labels != self.model.num_labels
        {
            return Err(Error::Config(
                "data and model disagree on input_dim or num_labels".into(),
            ));
        }
        Ok(())
    }

    /// Number of merge stages after stage 0.
    pub fn stage_count(&self) -> usize {
        stage_count(self.num_clients, self.merge_rate)
    }

    /// SHA-256 over the canonical JSON encoding, hex encoded.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(b"fedshard.config.v1\n");
        h.update(json.as_bytes());
        hex::encode(h.finalize())
    }
}

/// Smallest `P` with `r^P >= k`.
pub fn stage_count(k: usize, r: usize) -> usize {
    assert!(r >= 2, "merge rate must be >= 2");
    let mut p = 0;
    let mut reach = 1usize;
    while reach < k {
        reach = reach.saturating_mul(r);
        p += 1;
    }
    p
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShardNode {
    pub stage: usize,
    /// Position of the shard within its stage in the original tree. Stays
    /// fixed when other shards are dropped, since it keys the RNG streams.
    pub index: usize,
    pub client_ids: Vec<usize>,
    pub children: Vec<usize>,
    pub weight: f64,
    pub rounds: usize,
    /// Angle between the shard's stage update and the global stage update.
    pub alpha: f64,
    /// `alpha` with the side of the stage's principal residual direction.
    pub signed_alpha: f64,
    pub theta_init: ParamVector,
    pub theta_final: ParamVector,
}

/// Structure of one shard, enough to replay training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeNode {
    pub index: usize,
    pub children: Vec<usize>,
    pub clients: Vec<usize>,
    pub rounds: usize,
}

/// Merge tree without parameters. `stages[0]` describes stage 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeShape {
    pub num_clients: usize,
    pub merge_rate: usize,
    pub stages: Vec<Vec<ShapeNode>>,
}

impl TreeShape {
    /// Total client-rounds of training every shard.
    pub fn training_client_rounds(&self) -> usize {
        self.stages
            .iter()
            .flatten()
            .map(|n| n.rounds * n.clients.len())
            .sum()
    }

    /// A tree built from seeded random merges with fixed rounds.
    pub fn random(k: usize, r: usize, t0: usize, seed: u64) -> Result<TreeShape> {
        if k < 2 || r < 2 {
            return Err(Error::invalid("random tree needs k >= 2 and r >= 2"));
        }
        let mut prev: Vec<Vec<usize>> = (0..k).map(|c| vec![c]).collect();
        let mut stages = Vec::new();
        for p in 1..=stage_count(k, r) {
            let plan = adaptive::random_merge(prev.len(), r, seed, p);
            let nodes: Vec<ShapeNode> = plan
                .groups
                .iter()
                .enumerate()
                .map(|(s, g)| {
                    let mut clients: Vec<usize> =
                        g.iter().flat_map(|&i| prev[i].iter().copied()).collect();
                    clients.sort_unstable();
                    ShapeNode {
                        index: s,
                        children: g.clone(),
                        clients,
                        rounds: t0,
                    }
                })
                .collect();
            prev = nodes.iter().map(|n| n.clients.clone()).collect();
            stages.push(nodes);
        }
        Ok(TreeShape {
            num_clients: k,
            merge_rate: r,
            stages,
        })
    }
}

/// Cached state of a run: every shard of every stage with its models.
#[derive(Clone, Debug, PartialEq)]
pub struct FlCache {
    pub config: RunConfig,
    pub config_digest: String,
    pub theta0: ParamVector,
    /// `stages[0]` are the singleton shards. Shards emptied by unlearning are absent.
    pub stages: Vec<Vec<ShardNode>>,
    /// Per-client contribution angle, indexed by client id.
    pub client_alphas: Vec<f64>,
    /// Stage at which each client's angle was last refreshed.
    pub client_alpha_stage: Vec<usize>,
    /// Clients removed by unlearning, ascending.
    pub removed: Vec<usize>,
}

impl FlCache {
    pub fn num_clients(&self) -> usize {
        self.config.num_clients
    }

    pub fn merge_rate(&self) -> usize {
        self.config.merge_rate
    }

    /// Number of merge stages after stage 0.
    pub fn stage_count(&self) -> usize {
        self.stages.len() - 1
    }

    pub fn root(&self) -> &ShardNode {
        &self.stages[self.stage_count()][0]
    }

    pub fn final_model(&self) -> &ParamVector {
        &self.root().theta_final
    }

    pub fn shard(&self, stage: usize, index: usize) -> Option<&ShardNode> {
        let nodes = self.stages.get(stage)?;
        nodes
            .binary_search_by_key(&index, |n| n.index)
            .ok()
            .map(|i| &nodes[i])
    }

    pub fn remaining_clients(&self) -> Vec<usize> {
        self.stages[0].iter().map(|n| n.index).collect()
    }

    pub fn shape(&self) -> TreeShape {
        TreeShape {
            num_clients: self.num_clients(),
            merge_rate: self.merge_rate(),
            stages: self.stages[1..]
                .iter()
                .map(|nodes| {
                    nodes
                        .iter()
                        .map(|n| ShapeNode {
                            index: n.index,
                            children: n.children.clone(),
                            clients: n.client_ids.clone(),
                            rounds: n.rounds,
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Stored parameter arrays: the initial model plus one per trained shard.
    pub fn blob_count(&self) -> usize {
        1 + self.stage_blob_count()
    }

    /// Final-model arrays for stages `1..=P`.
    pub fn stage_blob_count(&self) -> usize {
        self.stages[1..].iter().map(Vec::len).sum()
    }

    /// Weighted average of the stage's shard models.
    pub fn stage_model(&self, stage: usize) -> Result<ParamVector> {
        weighted_mean(
            self.stages[stage]
                .iter()
                .map(|n| (n.weight, &n.theta_final)),
        )
    }

    pub fn training_client_rounds(&self) -> usize {
        self.shape().training_client_rounds()
    }
}

/// Coordinates that key a shard's local-training RNG streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShardKey {
    pub master_seed: u64,
    pub stage: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShardTraining {
    pub theta_final: ParamVector,
    /// Final-round angle of each client's local update against the shard update.
    pub client_alphas: Vec<(usize, f64)>,
}

/// Weighted average of child models, accumulated in the given order.
pub fn init_super_shard(children: &[(f64, &ParamVector)]) -> Result<(ParamVector, f64)> {
    if children.is_empty() {
        return Err(Error::invalid("a super-shard needs at least one child"));
    }
    let weight: f64 = children.iter().map(|(w, _)| w).sum();
    let theta = weighted_mean(children.iter().map(|&(w, t)| (w, t)))?;
    Ok((theta, weight))
}

fn client(clients: &[ClientData], id: usize) -> Result<&ClientData> {
    clients
        .get(id)
        .filter(|c| c.client_id == id)
        .ok_or_else(|| Error::invalid(format!("no data for client {id}")))
}

/// Angle with zero-length updates mapped to 0.
fn angle_or_zero(u: &ParamVector, v: &ParamVector, what: &str) -> f64 {
    match angle_between(u, v) {
        Ok(a) => a,
        Err(_) => {
            log::warn!("{what}: zero-length update, angle set to 0");
            0.0
        }
    }
}

/// One FedAvg round; returns the new model and each client's local result.
fn fedavg_round(
    theta: &ParamVector,
    client_ids: &[usize],
    clients: &[ClientData],
    round: usize,
    key: ShardKey,
    local: &LocalTrainConfig,
    spec: &ModelSpec,
) -> Result<(ParamVector, Vec<ParamVector>)> {
    let mut locals = Vec::with_capacity(client_ids.len());
    let mut weights = Vec::with_capacity(client_ids.len());
    for &c in client_ids {
        let data = &client(clients, c)?.train;
        let seed = rng::derive_seed(
            key.master_seed,
            &[
                rng::DOMAIN_LOCAL,
                key.stage as u64,
                key.index as u64,
                round as u64,
                c as u64,
            ],
        );
        locals.push(local_train(theta, data, local, spec, seed)?);
        weights.push(data.len() as f64);
    }
    let next = weighted_mean(weights.iter().copied().zip(&locals))?;
    Ok((next, locals))
}

/// FedAvg among `client_ids` (ascending) for `rounds` rounds from `theta_init`.
pub fn train_shard(
    theta_init: &ParamVector,
    client_ids: &[usize],
    clients: &[ClientData],
    rounds: usize,
    key: ShardKey,
    local: &LocalTrainConfig,
    spec: &ModelSpec,
) -> Result<ShardTraining> {
    if client_ids.is_empty() {
        return Err(Error::invalid("cannot train a shard without clients"));
    }
    for &c in client_ids {
        if client(clients, c)?.train.is_empty() {
            return Err(Error::invalid(format!("client {c} has no training data")));
        }
    }
    let mut theta = theta_init.clone();
    let mut client_alphas = Vec::new();
    for round in 0..rounds {
        let (next, locals) = fedavg_round(&theta, client_ids, clients, round, key, local, spec)?;
        if round + 1 == rounds {
            let shard_update = next.sub(&theta);
            client_alphas = client_ids
                .iter()
                .zip(&locals)
                .map(|(&c, l)| {
                    (
                        c,
                        angle_or_zero(&l.sub(&theta), &shard_update, "client angle"),
                    )
                })
                .collect();
        }
        theta = next;
    }
    Ok(ShardTraining {
        theta_final: theta,
        client_alphas,
    })
}

/// Sets `alpha` and `signed_alpha` for every shard of a stage.
///
/// The unsigned angle compares each shard's update with the stage's global
/// update. The sign comes from projecting the part of the shard update
/// orthogonal to the global update onto the principal direction of those
/// residuals (power iteration on their Gram matrix, sign fixed so the
/// largest coefficient is positive).
pub fn assign_stage_alphas(nodes: &mut [ShardNode]) -> Result<()> {
    if nodes.is_empty() {
        return Ok(());
    }
    let global = weighted_mean(nodes.iter().map(|n| (n.weight, &n.theta_final)))?;
    let start = weighted_mean(nodes.iter().map(|n| (n.weight, &n.theta_init)))?;
    let g = global.sub(&start);
    let updates: Vec<ParamVector> = nodes
        .iter()
        .map(|n| n.theta_final.sub(&n.theta_init))
        .collect();
    for (n, u) in nodes.iter_mut().zip(&updates) {
        n.alpha = angle_or_zero(u, &g, "shard angle");
    }
    let signs = residual_signs(&updates, &g);
    for (n, s) in nodes.iter_mut().zip(signs) {
        n.signed_alpha = s * n.alpha;
    }
    Ok(())
}

fn residual_signs(updates: &[ParamVector], g: &ParamVector) -> Vec<f64> {
    let n = updates.len();
    let gg = numkit::dot(g.as_slice(), g.as_slice());
    let residuals: Vec<Vec<f64>> = updates
        .iter()
        .map(|u| {
            let coef = if gg > 0.0 {
                numkit::dot(u.as_slice(), g.as_slice()) / gg
            } else {
                0.0
            };
            u.as_slice()
                .iter()
                .zip(g.as_slice())
                .map(|(a, b)| a - coef * b)
                .collect()
        })
        .collect();
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = numkit::dot(&residuals[i], &residuals[j]);
            gram[i * n + j] = v;
            gram[j * n + i] = v;
        }
    }
    let mul = |c: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| (0..n).map(|j| gram[i * n + j] * c[j]).sum())
            .collect()
    };
    let mut c: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 / n as f64).collect();
    for _ in 0..200 {
        let next = mul(&c);
        let norm = next.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return vec![1.0; n];
        }
        c = next.into_iter().map(|v| v / norm).collect();
    }
    let lead = (0..n).fold(
        0,
        |best, i| if c[i].abs() > c[best].abs() { i } else { best },
    );
    if c[lead] < 0.0 {
        c.iter_mut().for_each(|v| *v = -*v);
    }
    mul(&c)
        .into_iter()
        .map(|p| if p < 0.0 { -1.0 } else { 1.0 })
        .collect()
}

/// Client-round accounting for one stage of a (re)training pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageWork {
    pub stage: usize,
    /// Indices of the shards that were trained in this pass.
    pub trained: Vec<usize>,
    /// Indices of shards left without clients and removed.
    pub dropped: Vec<usize>,
    /// Rounds times client count before any removal in this pass; dropped
    /// shards count too.
    pub paper_client_rounds: usize,
    /// Rounds times the clients that actually trained.
    pub actual_client_rounds: usize,
}

enum Built {
    /// Shard index and the client-rounds it would have cost before removal.
    Dropped(usize, usize),
    Reused(ShardNode),
    Trained(ShardNode, ShardTraining, usize),
}

struct Trainer<'a> {
    config: &'a RunConfig,
    clients: &'a [ClientData],
    excluded: &'a BTreeSet<usize>,
}

impl Trainer<'_> {
    /// Builds one stage from its shape, skipping excluded clients and
    /// reusing shards of `reuse` whose client set is unchanged.
    fn stage(
        &self,
        stage: usize,
        prev: &[ShardNode],
        plan: &[ShapeNode],
        reuse: Option<&[ShardNode]>,
        alphas: &mut [f64],
        alpha_stage: &mut [usize],
    ) -> Result<(Vec<ShardNode>, StageWork)> {
        let find = |nodes: &'_ [ShardNode], index: usize| -> Option<usize> {
            nodes.binary_search_by_key(&index, |n| n.index).ok()
        };
        let built: Vec<Built> = plan
            .par_iter()
            .map(|shape| -> Result<_> {
                let survivors: Vec<usize> = shape
                    .clients
                    .iter()
                    .copied()
                    .filter(|c| !self.excluded.contains(c))
                    .collect();
                if survivors.is_empty() {
                    return Ok(Built::Dropped(
                        shape.index,
                        shape.rounds * shape.clients.len(),
                    ));
                }
                if let Some(old) = reuse.and_then(|r| find(r, shape.index).map(|i| &r[i])) {
                    if old.client_ids == survivors {
                        return Ok(Built::Reused(old.clone()));
                    }
                }
                let children: Vec<&ShardNode> = shape
                    .children
                    .iter()
                    .filter_map(|&c| find(prev, c).map(|i| &prev[i]))
                    .collect();
                let parts: Vec<(f64, &ParamVector)> = children
                    .iter()
                    .map(|c| (c.weight, &c.theta_final))
                    .collect();
                let (theta_init, weight) = init_super_shard(&parts)?;
                let key = ShardKey {
                    master_seed: self.config.master_seed,
                    stage,
                    index: shape.index,
                };
                let trained = train_shard(
                    &theta_init,
                    &survivors,
                    self.clients,
                    shape.rounds,
                    key,
                    &self.config.local,
                    &self.config.model,
                )?;
                let node = ShardNode {
                    stage,
                    index: shape.index,
                    client_ids: survivors,
                    children: children.iter().map(|c| c.index).collect(),
                    weight,
                    rounds: shape.rounds,
                    alpha: 0.0,
                    signed_alpha: 0.0,
                    theta_init,
                    theta_final: trained.theta_final.clone(),
                };
                Ok(Built::Trained(node, trained, shape.clients.len()))
            })
            .collect::<Result<_>>()?;

        let mut work = StageWork {
            stage,
            ..StageWork::default()
        };
        let mut nodes = Vec::with_capacity(built.len());
        for b in built {
            match b {
                Built::Dropped(index, paper) => {
                    work.dropped.push(index);
                    work.paper_client_rounds += paper;
                }
                Built::Reused(node) => nodes.push(node),
                Built::Trained(node, t, planned_size) => {
                    work.trained.push(node.index);
                    work.paper_client_rounds += node.rounds * planned_size;
                    work.actual_client_rounds += node.rounds * node.client_ids.len();
                    for (c, a) in t.client_alphas {
                        alphas[c] = a;
                        alpha_stage[c] = stage;
                    }
                    nodes.push(node);
                }
            }
        }
        assign_stage_alphas(&mut nodes)?;
        Ok((nodes, work))
    }
}

fn check_clients(config: &RunConfig, clients: &[ClientData]) -> Result<()> {
    if clients.len() != config.num_clients {
        return Err(Error::invalid(format!(
            "config declares {} clients, got {}",
            config.num_clients,
            clients.len()
        )));
    }
    for (i, c) in clients.iter().enumerate() {
        if c.client_id != i {
            return Err(Error::invalid("client ids must be 0..K in order"));
        }
    }
    Ok(())
}

fn initial_stage(k: usize, theta0: &ParamVector, excluded: &BTreeSet<usize>) -> Vec<ShardNode> {
    (0..k)
        .filter(|c| !excluded.contains(c))
        .map(|c| ShardNode {
            stage: 0,
            index: c,
            client_ids: vec![c],
            children: Vec::new(),
            weight: 1.0,
            rounds: 0,
            alpha: 0.0,
            signed_alpha: 0.0,
            theta_init: theta0.clone(),
            theta_final: theta0.clone(),
        })
        .collect()
}

/// Stage 0: one singleton shard per client with angle 0 and weight 1.
pub fn build_initial_stage(k: usize, theta0: &ParamVector) -> Vec<ShardNode> {
    initial_stage(k, theta0, &BTreeSet::new())
}

fn plan_stage(config: &RunConfig, stage: usize, prev: &[ShardNode]) -> Result<Vec<ShapeNode>> {
    let r = config.merge_rate;
    let plan: MergePlan = match config.merge {
        MergePolicy::Directional => {
            let alphas: Vec<f64> = prev.iter().map(|n| n.signed_alpha).collect();
            let sizes: Vec<usize> = prev.iter().map(|n| n.client_ids.len()).collect();
            adaptive::merge_shards_a1(&alphas, &sizes, r, config.master_seed, stage)?
        }
        MergePolicy::Random => adaptive::random_merge(prev.len(), r, config.master_seed, stage),
    };
    let rounds = match config.rounds {
        RoundPolicy::Fixed { t0 } => vec![t0; plan.groups.len()],
        RoundPolicy::Adaptive { range } => {
            let child_alphas: Vec<Vec<f64>> = plan
                .groups
                .iter()
                .map(|g| g.iter().map(|&i| prev[i].alpha).collect())
                .collect();
            adaptive::allocate_rounds_a2(&child_alphas, range)?
        }
    };
    Ok(plan
        .groups
        .iter()
        .zip(rounds)
        .enumerate()
        .map(|(s, (g, rounds))| {
            let mut clients: Vec<usize> = g
                .iter()
                .flat_map(|&i| prev[i].client_ids.iter().copied())
                .collect();
            clients.sort_unstable();
            ShapeNode {
                index: s,
                children: g.iter().map(|&i| prev[i].index).collect(),
                clients,
                rounds,
            }
        })
        .collect())
}

/// Full staged training run.
pub fn run_training(config: &RunConfig, clients: &[ClientData]) -> Result<FlCache> {
    config.validate()?;
    check_clients(config, clients)?;
    let k = config.num_clients;
    let theta0 = init_params(&config.model, config.master_seed)?;
    let none = BTreeSet::new();
    let trainer = Trainer {
        config,
        clients,
        excluded: &none,
    };
    let mut stages = vec![build_initial_stage(k, &theta0)];
    let mut alphas = vec![0.0; k];
    let mut alpha_stage = vec![0; k];
    for p in 1..=config.stage_count() {
        let prev = &stages[p - 1];
        let plan = plan_stage(config, p, prev)?;
        let (nodes, _) = trainer.stage(p, prev, &plan, None, &mut alphas, &mut alpha_stage)?;
        stages.push(nodes);
    }
    Ok(FlCache {
        config: config.clone(),
        config_digest: config.digest(),
        theta0,
        stages,
        client_alphas: alphas,
        client_alpha_stage: alpha_stage,
        removed: Vec::new(),
    })
}

/// Replays a fixed tree shape without the `excluded` clients.
///
/// With `reuse`, shards whose surviving client set matches a shard of the
/// given cache are copied instead of trained. Shards left without clients
/// are dropped. Returns the new cache and the per-stage work done.
pub fn replay(
    config: &RunConfig,
    shape: &TreeShape,
    clients: &[ClientData],
    excluded: &BTreeSet<usize>,
    reuse: Option<&FlCache>,
) -> Result<(FlCache, Vec<StageWork>)> {
    config.validate()?;
    check_clients(config, clients)?;
    let k = config.num_clients;
    if shape.num_clients != k || shape.merge_rate != config.merge_rate {
        return Err(Error::invalid(
            "tree shape does not match the run configuration",
        ));
    }
    if excluded.len() >= k || excluded.iter().any(|&c| c >= k) {
        return Err(Error::invalid(
            "excluded set must name existing clients and leave at least one",
        ));
    }
    let theta0 = init_params(&config.model, config.master_seed)?;
    if let Some(cache) = reuse {
        if !cache.theta0.bit_eq(&theta0) {
            return Err(Error::CacheDigest {
                what: "initial model".into(),
            });
        }
    }
    let trainer = Trainer {
        config,
        clients,
        excluded,
    };
    let mut stages = vec![initial_stage(k, &theta0, excluded)];
    let (mut alphas, mut alpha_stage) = match reuse {
        Some(c) => (c.client_alphas.clone(), c.client_alpha_stage.clone()),
        None => (vec![0.0; k], vec![0; k]),
    };
    let mut work = Vec::new();
    for (i, plan) in shape.stages.iter().enumerate() {
        let p = i + 1;
        let old = reuse.and_then(|c| c.stages.get(p)).map(Vec::as_slice);
        let (nodes, w) =
            trainer.stage(p, &stages[p - 1], plan, old, &mut alphas, &mut alpha_stage)?;
        stages.push(nodes);
        work.push(w);
    }
    if stages.last().is_none_or(|s| s.len() != 1) {
        return Err(Error::invalid(
            "tree shape does not end in a single root shard",
        ));
    }
    let cache = FlCache {
        config: config.clone(),
        config_digest: config.digest(),
        theta0,
        stages,
        client_alphas: alphas,
        client_alpha_stage: alpha_stage,
        removed: excluded.iter().copied().collect(),
    };
    Ok((cache, work))
}

/// Retrains the tree of `template` from scratch without `excluded`.
pub fn retrain_with_structure(
    template: &FlCache,
    clients: &[ClientData],
    excluded: &BTreeSet<usize>,
) -> Result<FlCache> {
    let mut all: BTreeSet<usize> = template.removed.iter().copied().collect();
    all.extend(excluded.iter().copied());
    Ok(replay(&template.config, &template.shape(), clients, &all, None)?.0)
}

/// Pools the held-out data of the given clients.
pub fn pooled_test(clients: &[ClientData], ids: &[usize]) -> Result<Dataset> {
    let first = clients
        .first()
        .ok_or_else(|| Error::invalid("no clients"))?;
    let mut data = Dataset::empty(first.test.dim());
    for &c in ids {
        data.extend(&client(clients, c)?.test);
    }
    Ok(data)
}

/// Accuracy of each stage's global model on the pooled held-out data of the
/// remaining clients; entry 0 is the initial model.
pub fn stage_accuracies(cache: &FlCache, clients: &[ClientData]) -> Result<Vec<EvalReport>> {
    let test = pooled_test(clients, &cache.remaining_clients())?;
    (0..cache.stages.len())
        .map(|p| numkit::evaluate(&cache.stage_model(p)?, &test, &cache.config.model))
        .collect()
}

/// Trains pilot shards round by round until the mean training loss improves
/// by less than `tolerance`, for stage 1 and stage 2 of a random tree.
/// Returns the observed round counts (each capped at `cap`).
pub fn pilot_round_counts(
    config: &RunConfig,
    clients: &[ClientData],
    tolerance: f64,
    cap: usize,
) -> Result<Vec<usize>> {
    config.validate()?;
    check_clients(config, clients)?;
    let shape = TreeShape::random(config.num_clients, config.merge_rate, 0, config.master_seed)?;
    let theta0 = init_params(&config.model, config.master_seed)?;
    let shard_loss = |theta: &ParamVector, ids: &[usize]| -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0.0;
        for &c in ids {
            let d = &client(clients, c)?.train;
            total += loss_and_grad(theta, d, &config.model)?.0 * d.len() as f64;
            n += d.len() as f64;
        }
        Ok(total / n)
    };
    let mut counts = Vec::new();
    let mut prev_models: Vec<(f64, ParamVector)> = vec![(1.0, theta0); config.num_clients];
    for (i, stage) in shape.stages.iter().take(2).enumerate() {
        let mut models = Vec::with_capacity(stage.len());
        for node in stage {
            let parts: Vec<(f64, &ParamVector)> = node
                .children
                .iter()
                .map(|&c| (prev_models[c].0, &prev_models[c].1))
                .collect();
            let (mut theta, weight) = init_super_shard(&parts)?;
            let key = ShardKey {
                master_seed: config.master_seed,
                stage: i + 1,
                index: node.index,
            };
            let mut loss = shard_loss(&theta, &node.clients)?;
            let mut used = cap;
            for round in 0..cap {
                theta = fedavg_round(
                    &theta,
                    &node.clients,
                    clients,
                    round,
                    key,
                    &config.local,
                    &config.model,
                )?
                .0;
                let next = shard_loss(&theta, &node.clients)?;
                let improvement = loss - next;
                loss = next;
                if improvement < tolerance {
                    used = round + 1;
                    break;
                }
            }
            counts.push(used);
            models.push((weight, theta));
        }
        prev_models = models;
    }
    Ok(counts)
}

#[derive(Serialize, Deserialize)]
struct BlobRef {
    offset: u64,
    len: u64,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    index: usize,
    clients: Vec<usize>,
    children: Vec<usize>,
    weight: f64,
    rounds: usize,
    alpha: f64,
    signed_alpha: f64,
    theta_final: Option<BlobRef>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    num_clients: usize,
    merge_rate: usize,
    stage_count: usize,
    config_digest: String,
    config: RunConfig,
    removed_clients: Vec<usize>,
    client_alphas: Vec<f64>,
    client_alpha_stage: Vec<usize>,
    theta0: BlobRef,
    stages: Vec<Vec<NodeRecord>>,
}

fn append_blob(buf: &mut Vec<u8>, theta: &ParamVector) -> BlobRef {
    let offset = buf.len() as u64;
    let start = buf.len();
    buf.extend_from_slice(&(theta.len() as u64).to_le_bytes());
    for v in theta.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    BlobRef {
        offset,
        len: theta.len() as u64,
        sha256: hex::encode(Sha256::digest(&buf[start..])),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST)
}

pub fn blob_path(dir: &Path) -> PathBuf {
    dir.join(BLOBS)
}

/// Writes the cache as `manifest.json` plus `params.bin` inside `dir`.
///
/// Each file is written to a temporary name and renamed into place.
pub fn save_cache(cache: &FlCache, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blobs = Vec::new();
    let theta0 = append_blob(&mut blobs, &cache.theta0);
    let stages = cache
        .stages
        .iter()
        .map(|nodes| {
            nodes
                .iter()
                .map(|n| NodeRecord {
                    index: n.index,
                    clients: n.client_ids.clone(),
                    children: n.children.clone(),
                    weight: n.weight,
                    rounds: n.rounds,
                    alpha: n.alpha,
                    signed_alpha: n.signed_alpha,
                    theta_final: (n.stage > 0).then(|| append_blob(&mut blobs, &n.theta_final)),
                })
                .collect()
        })
        .collect();
    let manifest = Manifest {
        format_version: CACHE_VERSION,
        num_clients: cache.num_clients(),
        merge_rate: cache.merge_rate(),
        stage_count: cache.stage_count(),
        config_digest: cache.config_digest.clone(),
        config: cache.config.clone(),
        removed_clients: cache.removed.clone(),
        client_alphas: cache.client_alphas.clone(),
        client_alpha_stage: cache.client_alpha_stage.clone(),
        theta0,
        stages,
    };
    write_atomic(&blob_path(dir), &blobs)?;
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&manifest_path(dir), &json)?;
    Ok(())
}

fn read_blob(bytes: &[u8], blob: &BlobRef, what: &str) -> Result<ParamVector> {
    let start = blob.offset as usize;
    let end = start
        .checked_add(8 + 8 * blob.len as usize)
        .ok_or_else(|| Error::CacheFormat(format!("{what}: blob extent overflows")))?;
    if end > bytes.len() {
        return Err(Error::CacheTruncated(format!(
            "{what} needs bytes {start}..{end}, file has {}",
            bytes.len()
        )));
    }
    let raw = &bytes[start..end];
    if hex::encode(Sha256::digest(raw)) != blob.sha256 {
        return Err(Error::CacheDigest {
            what: what.to_string(),
        });
    }
    let declared = u64::from_le_bytes(raw[..8].try_into().unwrap());
    if declared != blob.len {
        return Err(Error::CacheFormat(format!(
            "{what}: length prefix {declared} != {}",
            blob.len
        )));
    }
    let values = raw[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ParamVector::new(values).map_err(|e| Error::CacheFormat(format!("{what}: {e}")))
}

/// Loads a cache written by [`save_cache`], checking version, digests and extents.
pub fn load_cache(dir: &Path) -> Result<FlCache> {
    let text = fs::read_to_string(manifest_path(dir))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::CacheFormat(e.to_string()))?;
    let found = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::CacheFormat("manifest lacks format_version".into()))?
        as u32;
    if found != CACHE_VERSION {
        return Err(Error::CacheVersion {
            found,
            expected: CACHE_VERSION,
        });
    }
    let manifest: Manifest =
        serde_json::from_value(raw).map_err(|e| Error::CacheFormat(e.to_string()))?;
    if manifest.config.digest() != manifest.config_digest {
        return Err(Error::CacheDigest {
            what: "run configuration".into(),
        });
    }
    let bytes = fs::read(blob_path(dir))?;
    let theta0 = read_blob(&bytes, &manifest.theta0, "initial model")?;
    let mut stages: Vec<Vec<ShardNode>> = Vec::with_capacity(manifest.stages.len());
    for (p, records) in manifest.stages.iter().enumerate() {
        let mut nodes = Vec::with_capacity(records.len());
        for rec in records {
            let (theta_init, theta_final) = if p == 0 {
                (theta0.clone(), theta0.clone())
            } else {
                let blob = rec.theta_final.as_ref().ok_or_else(|| {
                    Error::CacheFormat(format!("stage {p} shard {} has no model", rec.index))
                })?;
                let prev: &Vec<ShardNode> = &stages[p - 1];
                let parts = rec
                    .children
                    .iter()
                    .map(|&c| {
                        prev.binary_search_by_key(&c, |n| n.index)
                            .map(|i| (prev[i].weight, &prev[i].theta_final))
                            .map_err(|_| {
                                Error::CacheFormat(format!(
                                    "stage {p} shard {} names missing child {c}",
                                    rec.index
                                ))
                            })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let init = init_super_shard(&parts)
                    .map_err(|e| Error::CacheFormat(e.to_string()))?
                    .0;
                (
                    init,
                    read_blob(&bytes, blob, &format!("stage {p} shard {}", rec.index))?,
                )
            };
            nodes.push(ShardNode {
                stage: p,
                index: rec.index,
                client_ids: rec.clients.clone(),
                children: rec.children.clone(),
                weight: rec.weight,
                rounds: rec.rounds,
                alpha: rec.alpha,
                signed_alpha: rec.signed_alpha,
                theta_init,
                theta_final,
            });
        }
        stages.push(nodes);
    }
    if stages.len() != manifest.stage_count + 1 || stages.last().is_none_or(|s| s.len() != 1) {
        return Err(Error::CacheFormat(
            "stage list does not end in one root shard".into(),
        ));
    }
    Ok(FlCache {
        config: manifest.config,
        config_digest: manifest.config_digest,
        theta0,
        stages,
        client_alphas: manifest.client_alphas,
        client_alpha_stage: manifest.client_alpha_stage,
        removed: manifest.removed_clients,
    })
}
