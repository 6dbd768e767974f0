//! Command implementations. Each returns a JSON report.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use fedshard::analysis::{efficiency_report, leavers_in_shards, r1};
use fedshard::datagen::{build_clients, ClientData};
use fedshard::engine::{
    load_cache, pooled_test, retrain_with_structure, run_training, save_cache, stage_accuracies,
    FlCache, MergePolicy, RoundPolicy, RunConfig, TreeShape,
};
use fedshard::fairmetrics::{self, FairnessInputs, DEFAULT_EPSILON};
use fedshard::numkit;
use fedshard::scenarios::{
    grouped_training, own_accuracy, run_cascade, run_dpa, scratch_retrain_baseline, Unlearner,
};
use fedshard::unlearn::{
    count_cost, find_affected, sweep_all_single_costs, unlearn as unlearn_clients, SweepMode,
};

use crate::config::ExperimentConfig;
use crate::exit::{CliError, Code, Tag};

type Result<T> = std::result::Result<T, CliError>;

/// Pretty JSON on stdout, and in `path` when given.
pub fn emit(report: &Value, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
    if let Some(path) = path {
        fs::write(path, &text).map_err(|e| {
            CliError::new(Code::Other, format!("cannot write {}: {e}", path.display()))
        })?;
    }
    print!("{text}");
    Ok(())
}

/// SHA-256 of the compact JSON encoding, hex encoded.
fn json_digest<T: Serialize>(value: &T) -> String {
    let mut h = Sha256::new();
    h.update(
        serde_json::to_string(value)
            .expect("value serializes")
            .as_bytes(),
    );
    hex::encode(h.finalize())
}

fn header(command: &str, config: &RunConfig, config_digest: &str) -> Value {
    json!({
        "command": command,
        "config_digest": config_digest,
        "master_seed": config.master_seed,
        "data_seed": config.data.seed,
    })
}

fn merge(mut base: Value, extra: Value) -> Value {
    if let (Value::Object(a), Value::Object(b)) = (&mut base, extra) {
        a.extend(b);
    }
    base
}

fn clients_for(config: &RunConfig) -> Result<Vec<ClientData>> {
    build_clients(&config.data, config.num_clients).tag(Code::Data)
}

fn open_cache(dir: &Path) -> Result<FlCache> {
    let cache = load_cache(dir).tag(Code::Cache)?;
    log::info!(
        "loaded cache {} ({} clients remaining)",
        dir.display(),
        cache.remaining_clients().len()
    );
    Ok(cache)
}

fn write_cache(cache: &FlCache, dir: &Path) -> Result<()> {
    save_cache(cache, dir).tag(Code::Cache)?;
    log::info!("wrote cache {}", dir.display());
    Ok(())
}

pub fn train(config_path: &Path, out: &Path, no_a1: bool, no_a2: bool) -> Result<Value> {
    let experiment = ExperimentConfig::load(config_path)?;
    let mut run = experiment.run;
    if no_a1 {
        run.merge = MergePolicy::Random;
    }
    if no_a2 {
        if let RoundPolicy::Adaptive { range } = run.rounds {
            run.rounds = RoundPolicy::Fixed {
                t0: range.midpoint(),
            };
        }
    }
    let clients = clients_for(&run)?;
    let start = Instant::now();
    let cache = run_training(&run, &clients).tag(Code::Other)?;
    let train_secs = start.elapsed().as_secs_f64();
    write_cache(&cache, out)?;

    let stage_accuracy: Vec<f64> = stage_accuracies(&cache, &clients)
        .tag(Code::Other)?
        .into_iter()
        .map(|e| e.accuracy)
        .collect();
    let mut shard_accuracy = Vec::new();
    let mut shard_rounds = Vec::new();
    for stage in &cache.stages[1..] {
        let mut accs = Vec::new();
        for node in stage {
            let test = pooled_test(&clients, &node.client_ids).tag(Code::Other)?;
            accs.push(
                numkit::evaluate(&node.theta_final, &test, &run.model)
                    .tag(Code::Other)?
                    .accuracy,
            );
        }
        shard_accuracy.push(accs);
        shard_rounds.push(stage.iter().map(|n| n.rounds).collect::<Vec<_>>());
    }
    Ok(merge(
        header("train", &run, &cache.config_digest),
        json!({
            "merge": run.merge,
            "rounds": run.rounds,
            "num_clients": run.num_clients,
            "merge_rate": run.merge_rate,
            "stage_count": cache.stage_count(),
            "stage_accuracy": stage_accuracy,
            "shard_accuracy": shard_accuracy,
            "shard_rounds": shard_rounds,
            "training_client_rounds": cache.training_client_rounds(),
            "model_digest": cache.final_model().digest(),
            "durations": { "train_secs": train_secs },
        }),
    ))
}

pub fn unlearn(cache_dir: &Path, leavers: &[usize], out: &Path, verify: bool) -> Result<Value> {
    let cache = open_cache(cache_dir)?;
    let clients = clients_for(&cache.config)?;
    let affected = find_affected(&cache, leavers).tag(Code::Request)?;
    let outcome = unlearn_clients(&cache, &clients, leavers).tag(Code::Other)?;
    write_cache(&outcome.cache, out)?;
    let ledger = &outcome.ledger;
    let model_digest = outcome.cache.final_model().digest();
    let mut report = merge(
        header("unlearn", &cache.config, &cache.config_digest),
        json!({
            "leavers": ledger.leavers,
            "remaining": outcome.cache.remaining_clients(),
            "affected": affected,
            "p_prime": ledger.p_prime,
            "paper_client_rounds": ledger.paper_client_rounds,
            "actual_client_rounds": ledger.actual_client_rounds,
            "stages": ledger.stages,
            "model_digest": model_digest,
            "durations": { "unlearn_secs": ledger.wall_clock_secs },
        }),
    );
    if verify {
        let excluded: BTreeSet<usize> = outcome.cache.removed.iter().copied().collect();
        let oracle = retrain_with_structure(&cache, &clients, &excluded).tag(Code::Other)?;
        let oracle_digest = oracle.final_model().digest();
        report = merge(
            report,
            json!({
                "oracle_digest": oracle_digest,
                "matches_oracle": oracle_digest == model_digest,
            }),
        );
    }
    Ok(report)
}

pub fn metrics(cache_dir: &Path, unlearned: Option<&Path>, mode: SweepMode) -> Result<Value> {
    let pre = open_cache(cache_dir)?;
    let post = unlearned.map(open_cache).transpose()?;
    if let Some(post) = &post {
        if post.config_digest != pre.config_digest {
            return Err(CliError::new(
                Code::Cache,
                format!(
                    "config digest mismatch: {} has {}, {} has {}",
                    cache_dir.display(),
                    pre.config_digest,
                    unlearned.unwrap().display(),
                    post.config_digest
                ),
            ));
        }
    }
    let clients = clients_for(&pre.config)?;
    let start = Instant::now();
    let costs = sweep_all_single_costs(&pre, &clients, mode).tag(Code::Other)?;
    let sweep_secs = start.elapsed().as_secs_f64();
    let ids: Vec<usize> = costs.iter().map(|c| c.client).collect();
    let alphas: Vec<f64> = ids.iter().map(|&c| pre.client_alphas[c]).collect();
    let z: Vec<f64> = costs.iter().map(|c| c.paper as f64).collect();
    let m_e_terms = fairmetrics::m_e_terms(&z, &alphas).tag(Code::Other)?;
    let m_e = m_e_terms.iter().sum::<f64>() / m_e_terms.len() as f64;

    let mut per_client: Vec<Value> = costs
        .iter()
        .zip(&alphas)
        .zip(&m_e_terms)
        .map(|((c, a), t)| {
            json!({
                "client": c.client,
                "alpha": a,
                "cost_paper": c.paper,
                "cost_actual": c.actual,
                "retrain_secs": c.wall_clock_secs,
                "m_e_term": t,
            })
        })
        .collect();
    let mut m_p = Value::Null;
    if let Some(post) = &post {
        let pre_acc = own_accuracy(pre.final_model(), &clients, &pre).tag(Code::Other)?;
        let post_acc = own_accuracy(post.final_model(), &clients, post).tag(Code::Other)?;
        let still: BTreeSet<usize> = post.remaining_clients().into_iter().collect();
        let inputs = FairnessInputs {
            delta_y: ids.iter().map(|&c| pre_acc[c] - post_acc[c]).collect(),
            alphas: alphas.clone(),
            remaining: (0..ids.len())
                .filter(|&i| still.contains(&ids[i]))
                .collect(),
            costs: z.clone(),
            epsilon: DEFAULT_EPSILON,
        };
        let fair = fairmetrics::report(&inputs).tag(Code::Other)?;
        for (i, entry) in per_client.iter_mut().enumerate() {
            *entry = merge(
                entry.take(),
                json!({
                    "removed": !still.contains(&ids[i]),
                    "delta_y": inputs.delta_y[i],
                    "uniqueness": fair.uniqueness[i],
                    "m_p_term": fair.m_p_terms[i],
                }),
            );
        }
        m_p = json!(fair.m_p);
    }
    Ok(merge(
        header("metrics", &pre.config, &pre.config_digest),
        json!({
            "sweep": mode,
            "epsilon": DEFAULT_EPSILON,
            "m_p": m_p,
            "m_e": m_e,
            "clients": per_client,
            "durations": { "sweep_secs": sweep_secs },
        }),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    Cascade,
    Dpa,
}

pub fn scenario(
    kind: Scenario,
    config_path: &Path,
    unlearner: Option<Unlearner>,
    seed: Option<u64>,
) -> Result<Value> {
    let mut experiment = ExperimentConfig::load(config_path)?;
    if let Some(seed) = seed {
        experiment.run.data.seed = seed;
        experiment.run.master_seed = seed;
    }
    if let Some(u) = unlearner {
        experiment.scenario.unlearner = u;
    }
    let run = &experiment.run;
    let params = &experiment.scenario;
    let (majority, minority) = params.groups(run.num_clients)?;
    let (cache, population) = grouped_training(run, majority, minority).tag(Code::Data)?;
    let body = match kind {
        Scenario::Cascade => {
            if params.initial_leavers > minority {
                return Err(CliError::new(
                    Code::Config,
                    format!(
                        "scenario.initial_leavers = {} exceeds the {minority} minority clients",
                        params.initial_leavers
                    ),
                ));
            }
            let leavers = &population.minority_ids[..params.initial_leavers];
            let report = run_cascade(
                &cache,
                &population.clients,
                leavers,
                params.payoff,
                params.unlearner,
            )
            .tag(Code::Other)?;
            json!({ "kind": "cascade", "result": report })
        }
        Scenario::Dpa => {
            let report = run_dpa(
                &cache,
                &population.clients,
                &population.minority_ids,
                params.tau,
                params.unlearner,
            )
            .tag(Code::Other)?;
            json!({ "kind": "dpa", "result": report })
        }
    };
    Ok(merge(
        merge(
            header("scenario", run, &cache.config_digest),
            json!({
                "experiment_digest": json_digest(&experiment),
                "scenario": params,
                "majority_labels": population.majority_labels,
                "minority_labels": population.minority_labels,
                "minority_ids": population.minority_ids,
            }),
        ),
        body,
    ))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// The uniform-round speedup as a reduced fraction.
fn r1_fraction(k: usize, r: usize, p: usize) -> String {
    let num = (r - 1) * k * p;
    let den = r * (k - 1);
    let g = gcd(num, den);
    format!("{}/{}", num / g, den / g)
}

pub fn analyze(k: usize, r: usize, t0: usize, m: usize, shards: usize, seed: u64) -> Result<Value> {
    if k < 2 || r < 2 || t0 == 0 {
        return Err(CliError::new(
            Code::Config,
            "analyze needs K >= 2, R >= 2 and T0 >= 1",
        ));
    }
    let shape = TreeShape::random(k, r, t0, seed).tag(Code::Config)?;
    let leavers = leavers_in_shards(&shape, m, shards).tag(Code::Request)?;
    let report = efficiency_report(&shape, &leavers).tag(Code::Other)?;
    let inputs = json!({ "k": k, "r": r, "t0": t0, "m": m, "shards": shards, "seed": seed });
    Ok(json!({
        "command": "analyze",
        "config_digest": json_digest(&inputs),
        "master_seed": seed,
        "inputs": inputs,
        "r1_fraction": r1_fraction(k, r, report.p),
        "leavers": leavers,
        "report": report,
    }))
}

pub fn baseline(cache_dir: &Path, leavers: &[usize], rounds: Option<usize>) -> Result<Value> {
    let cache = open_cache(cache_dir)?;
    let set = fedshard::unlearn::validate_request(&cache, leavers).tag(Code::Request)?;
    let clients = clients_for(&cache.config)?;
    let survivors: Vec<usize> = cache
        .remaining_clients()
        .into_iter()
        .filter(|c| !set.contains(c))
        .collect();
    let start = Instant::now();
    let (_, report) =
        scratch_retrain_baseline(&cache, &clients, &survivors, rounds).tag(Code::Other)?;
    let secs = start.elapsed().as_secs_f64();
    let sharded = count_cost(&cache.shape(), &set);
    let ratio = |a: usize, b: usize| {
        if b > 0 {
            json!(a as f64 / b as f64)
        } else {
            Value::Null
        }
    };
    Ok(merge(
        header("baseline", &cache.config, &cache.config_digest),
        json!({
            "leavers": set,
            "baseline": report,
            "sharded_paper_client_rounds": sharded.paper,
            "sharded_actual_client_rounds": sharded.actual,
            "speedup_paper": ratio(report.paper_client_rounds, sharded.paper),
            "speedup_actual": ratio(report.actual_client_rounds, sharded.actual),
            "r1": r1(cache.num_clients(), cache.merge_rate()),
            "durations": { "baseline_secs": secs },
        }),
    ))
}
