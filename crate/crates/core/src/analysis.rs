//! Closed-form speedups and their counted counterparts.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::engine::{stage_count, TreeShape};
use crate::error::{Error, Result};
use crate::unlearn::{count_cost, one_by_one_cost, p_prime, sweep_shape_costs};

/// Speedup of path-only retraining over retraining everything, for uniform rounds:
/// `((R - 1) / R) (K / (K - 1)) P`.
pub fn r1(k: usize, r: usize) -> f64 {
    let (kf, rf) = (k as f64, r as f64);
    ((rf - 1.0) / rf) * (kf / (kf - 1.0)) * stage_count(k, r) as f64
}

/// Envelope of the speedup when shard rounds vary within `[t_min, t_max]`
/// around the mean `t0`.
pub fn r1_bounds(k: usize, r: usize, t0: f64, t_min: f64, t_max: f64) -> Result<(f64, f64)> {
    if !(0.0 < t_min && t_min <= t0 && t0 <= t_max) {
        return Err(Error::invalid(format!(
            "round statistics must satisfy 0 < T_min <= T0 <= T_max, got ({t_min}, {t0}, {t_max})"
        )));
    }
    let base = r1(k, r);
    Ok((base * t0 / t_max, base * t0 / t_min))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct R2Bounds {
    pub minus: f64,
    pub plus: f64,
    /// Set when the lower value exceeds the upper one.
    pub inconsistent: bool,
}

/// Closed-form bounds on the speedup of removing `m` clients at once over
/// removing them one by one: `m` above, `(R/(R-1)) ((K-1)/K) m / (P - p')` below.
pub fn r2_bounds(k: usize, r: usize, m: usize, p_prime: usize) -> Result<R2Bounds> {
    let p = stage_count(k, r);
    if m == 0 || m >= k || p_prime >= p {
        return Err(Error::invalid(format!(
            "need 1 <= m < K and p' < P, got m = {m}, p' = {p_prime}"
        )));
    }
    let (kf, rf, mf) = (k as f64, r as f64, m as f64);
    let minus = (rf / (rf - 1.0)) * ((kf - 1.0) / kf) * mf / (p - p_prime) as f64;
    Ok(R2Bounds {
        minus,
        plus: mf,
        inconsistent: minus > mf,
    })
}

/// Per-client cost of a scheme that retrains every round after the leaver
/// joined, with all `k` clients in every round: `(T - join_c) K`.
pub fn staggered_cost_model(k: usize, total_rounds: usize, joins: &[usize]) -> Result<Vec<f64>> {
    if let Some(&j) = joins.iter().find(|&&j| j >= total_rounds) {
        return Err(Error::invalid(format!(
            "join round {j} outside [0, {total_rounds})"
        )));
    }
    Ok(joins
        .iter()
        .map(|&j| ((total_rounds - j) * k) as f64)
        .collect())
}

/// `k` join rounds spread evenly over `[0, span * T]`, floored.
pub fn uniform_joins(k: usize, total_rounds: usize, span: f64) -> Vec<usize> {
    (0..k)
        .map(|c| {
            let t = if k > 1 {
                span * total_rounds as f64 * c as f64 / (k - 1) as f64
            } else {
                0.0
            };
            (t.floor() as usize).min(total_rounds.saturating_sub(1))
        })
        .collect()
}

/// Stage-1 shards in depth-first order from the root, following child order.
pub fn stage1_dfs_order(shape: &TreeShape) -> Vec<usize> {
    fn walk(shape: &TreeShape, level: usize, index: usize, out: &mut Vec<usize>) {
        let nodes = &shape.stages[level];
        let Some(node) = nodes.iter().find(|n| n.index == index) else {
            return;
        };
        if level == 0 {
            out.push(node.index);
        } else {
            for &c in &node.children {
                walk(shape, level - 1, c, out);
            }
        }
    }
    let mut out = Vec::new();
    if let Some(top) = shape.stages.last() {
        for n in top {
            walk(shape, shape.stages.len() - 1, n.index, &mut out);
        }
    }
    out
}

/// `m` leavers packed into `n_shards` stage-1 shards spaced evenly along the
/// depth-first order, filled round-robin with each shard's lowest clients.
pub fn leavers_in_shards(shape: &TreeShape, m: usize, n_shards: usize) -> Result<BTreeSet<usize>> {
    let order = stage1_dfs_order(shape);
    if n_shards == 0 || n_shards > order.len() || n_shards > m {
        return Err(Error::invalid(format!(
            "cannot place {m} leavers in {n_shards} of {} shards",
            order.len()
        )));
    }
    let stride = order.len() / n_shards;
    let picked: Vec<&Vec<usize>> = (0..n_shards)
        .map(|i| {
            let index = order[i * stride];
            &shape.stages[0]
                .iter()
                .find(|n| n.index == index)
                .unwrap()
                .clients
        })
        .collect();
    let mut out = BTreeSet::new();
    let mut depth = 0;
    while out.len() < m {
        let before = out.len();
        for clients in &picked {
            if out.len() < m {
                if let Some(&c) = clients.get(depth) {
                    out.insert(c);
                }
            }
        }
        if out.len() == before {
            return Err(Error::invalid(format!(
                "{n_shards} shards hold fewer than {m} clients"
            )));
        }
        depth += 1;
    }
    Ok(out)
}

/// Analytic and counted efficiency figures for one tree and one leaving set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub k: usize,
    pub r: usize,
    pub p: usize,
    /// Mean rounds per stage and client: `T_train / (P K)`.
    pub t0_mean: f64,
    pub t_min: usize,
    pub t_max: usize,
    pub r1: f64,
    pub r1_lower: f64,
    pub r1_upper: f64,
    pub measured_t_train: usize,
    /// Mean paper-mode single-client cost over all clients.
    pub measured_t_un: f64,
    pub measured_r1: f64,
    pub beta: f64,
    pub m: usize,
    pub p_prime: usize,
    pub measured_t_mun: usize,
    pub measured_one_by_one: usize,
    pub measured_r2: f64,
    pub r2: Option<R2Bounds>,
}

pub fn efficiency_report(shape: &TreeShape, leavers: &BTreeSet<usize>) -> Result<EfficiencyReport> {
    let k = shape.num_clients;
    let r = shape.merge_rate;
    let p = shape.stages.len();
    let t_train = shape.training_client_rounds();
    let rounds: Vec<usize> = shape.stages.iter().flatten().map(|n| n.rounds).collect();
    let t_min = *rounds
        .iter()
        .min()
        .ok_or_else(|| Error::invalid("empty tree"))?;
    let t_max = *rounds.iter().max().unwrap();
    let t0_mean = t_train as f64 / (p * k) as f64;
    let singles = sweep_shape_costs(shape);
    let t_un = singles.values().map(|c| c.paper as f64).sum::<f64>() / singles.len() as f64;
    let base = r1(k, r);
    let (r1_lower, r1_upper) = r1_bounds(k, r, t0_mean, t_min as f64, t_max as f64)?;
    let m = leavers.len();
    let multi = count_cost(shape, leavers).paper;
    let serial = one_by_one_cost(shape, leavers).paper;
    let pp = p_prime(shape, leavers);
    let r2 = if m >= 1 && m < k && pp < p {
        Some(r2_bounds(k, r, m, pp)?)
    } else {
        None
    };
    Ok(EfficiencyReport {
        k,
        r,
        p,
        t0_mean,
        t_min,
        t_max,
        r1: base,
        r1_lower,
        r1_upper,
        measured_t_train: t_train,
        measured_t_un: t_un,
        measured_r1: t_train as f64 / t_un,
        beta: 1.0 - t_min as f64 / t0_mean,
        m,
        p_prime: pp,
        measured_t_mun: multi,
        measured_one_by_one: serial,
        measured_r2: if multi > 0 {
            serial as f64 / multi as f64
        } else {
            f64::NAN
        },
        r2,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub ks: Vec<usize>,
    pub t_un: Vec<f64>,
    /// `T_un(K_{i+1}) / T_un(K_i)`.
    pub doubling_ratios: Vec<f64>,
    pub ms: Vec<usize>,
    /// Cost of removing `m` tree-spread leavers at the largest `K`.
    pub t_mun: Vec<usize>,
    /// Largest allowed growth between consecutive `m`: `K T0 log_R(m_{i+1} / m_i)`.
    pub t_mun_allowance: Vec<f64>,
    pub violations: Vec<String>,
}

/// Counts single and multi-client removal costs on random trees with fixed
/// rounds and checks the linear-in-K and logarithmic-in-m growth.
pub fn validate_complexity(
    ks: &[usize],
    r: usize,
    t0: usize,
    ms: &[usize],
    seed: u64,
) -> Result<ComplexityReport> {
    let mut t_un = Vec::new();
    for &k in ks {
        let shape = TreeShape::random(k, r, t0, seed)?;
        let costs = sweep_shape_costs(&shape);
        t_un.push(costs.values().map(|c| c.paper as f64).sum::<f64>() / costs.len() as f64);
    }
    let doubling_ratios: Vec<f64> = t_un.windows(2).map(|w| w[1] / w[0]).collect();
    let mut violations = Vec::new();
    for (i, ratio) in doubling_ratios.iter().enumerate() {
        if ks[i + 1] == 2 * ks[i] && !(1.9..=2.1).contains(ratio) {
            violations.push(format!(
                "T_un({}) / T_un({}) = {ratio:.4}",
                ks[i + 1],
                ks[i]
            ));
        }
    }
    let k = *ks
        .iter()
        .max()
        .ok_or_else(|| Error::invalid("no client counts given"))?;
    let shape = TreeShape::random(k, r, t0, seed)?;
    let mut t_mun = Vec::new();
    for &m in ms {
        let leavers = leavers_in_shards(&shape, m, m.min(stage1_dfs_order(&shape).len()))?;
        t_mun.push(count_cost(&shape, &leavers).paper);
    }
    let t_mun_allowance: Vec<f64> = ms
        .windows(2)
        .map(|w| (k * t0) as f64 * (w[1] as f64 / w[0] as f64).ln() / (r as f64).ln())
        .collect();
    for i in 0..t_mun_allowance.len() {
        let growth = t_mun[i + 1] as f64 - t_mun[i] as f64;
        if growth > t_mun_allowance[i] + 1e-9 {
            violations.push(format!(
                "T_mun grew by {growth} from m = {} to m = {}, allowance {:.1}",
                ms[i],
                ms[i + 1],
                t_mun_allowance[i]
            ));
        }
    }
    Ok(ComplexityReport {
        ks: ks.to_vec(),
        t_un,
        doubling_ratios,
        ms: ms.to_vec(),
        t_mun,
        t_mun_allowance,
        violations,
    })
}
