//! Performance-fairness (`M_p`) and efficiency-fairness (`M_e`) scores.
//!
//! `M_p` pairs each client's accuracy drop with how unique its data is (the
//! angle distance to the nearest remaining client); both families are
//! min-max normalized and combined with `f(x, y) = (x + y)(1/x + 1/y)`,
//! which is smallest when the two agree. `M_e` is the variance of
//! unlearning costs with each client weighted by the inverse of its angle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-6;
/// Angles below this are raised to it before dividing.
pub const ALPHA_FLOOR: f64 = 1e-9;
/// Largest instance the brute-force oracle will enumerate.
pub const ORACLE_LIMIT: usize = 8;

pub fn dis(a: f64, b: f64) -> f64 {
    (a - b).abs()
}

/// `eps + (x - min) / max(max - min, eps)`.
///
/// Constant input maps to `eps` everywhere. Guarding with `max` rather than
/// adding `eps` to the range keeps the result exactly invariant under
/// positive affine rescaling whenever the range exceeds `eps`.
pub fn normalize(values: &[f64], eps: f64) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom = (hi - lo).max(eps);
    values.iter().map(|v| eps + (v - lo) / denom).collect()
}

/// `(x + y)(1/x + 1/y)`, at least 4 with equality iff `x == y`.
pub fn f_oplus(x: f64, y: f64) -> Result<f64> {
    if !(x > 0.0 && y > 0.0) {
        return Err(Error::invalid(format!(
            "f_oplus needs positive inputs, got ({x}, {y})"
        )));
    }
    Ok((x + y) * (1.0 / x + 1.0 / y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessInputs {
    /// Accuracy drop on each client's own held-out data, indexed by position.
    pub delta_y: Vec<f64>,
    /// Each client's contribution angle before unlearning.
    pub alphas: Vec<f64>,
    /// Positions of the clients that remain.
    pub remaining: Vec<usize>,
    /// Unlearning cost of each client, in client-rounds.
    pub costs: Vec<f64>,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub m_p: f64,
    pub m_e: f64,
    pub uniqueness: Vec<f64>,
    pub m_p_terms: Vec<f64>,
    pub m_e_terms: Vec<f64>,
}

/// Distance from each client to the closest other remaining client.
pub fn uniqueness(alphas: &[f64], remaining: &[usize]) -> Result<Vec<f64>> {
    (0..alphas.len())
        .map(|c| {
            remaining
                .iter()
                .filter(|&&r| r != c)
                .map(|&r| {
                    alphas
                        .get(r)
                        .map(|&a| dis(alphas[c], a))
                        .ok_or_else(|| Error::invalid(format!("remaining client {r} out of range")))
                })
                .try_fold(None::<f64>, |best, d| {
                    let d = d?;
                    Ok::<_, Error>(Some(best.map_or(d, |b| b.min(d))))
                })?
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "client {c} has no other remaining client to compare with"
                    ))
                })
        })
        .collect()
}

/// Per-client `f_oplus` terms after joint normalization of each family.
pub fn m_p_terms(delta_y: &[f64], uniq: &[f64], eps: f64) -> Result<Vec<f64>> {
    if delta_y.len() != uniq.len() || delta_y.is_empty() {
        return Err(Error::invalid(
            "M_p needs one accuracy drop and one uniqueness value per client",
        ));
    }
    let x = normalize(delta_y, eps);
    let y = normalize(uniq, eps);
    x.iter().zip(&y).map(|(&a, &b)| f_oplus(a, b)).collect()
}

pub fn m_p_from_values(delta_y: &[f64], uniq: &[f64], eps: f64) -> Result<f64> {
    let terms = m_p_terms(delta_y, uniq, eps)?;
    Ok(mean(&terms))
}

pub fn m_p(inputs: &FairnessInputs) -> Result<f64> {
    let uniq = uniqueness(&inputs.alphas, &inputs.remaining)?;
    m_p_from_values(&inputs.delta_y, &uniq, inputs.epsilon)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-client `(Z_avg - Z_c)^2 / |alpha_c|`, with tiny angles floored.
pub fn m_e_terms(costs: &[f64], alphas: &[f64]) -> Result<Vec<f64>> {
    if costs.len() != alphas.len() || costs.is_empty() {
        return Err(Error::invalid(
            "M_e needs one cost and one angle per client",
        ));
    }
    let avg = mean(costs);
    Ok(costs
        .iter()
        .zip(alphas)
        .map(|(z, a)| (avg - z) * (avg - z) / a.abs().max(ALPHA_FLOOR))
        .collect())
}

pub fn m_e(costs: &[f64], alphas: &[f64]) -> Result<f64> {
    Ok(mean(&m_e_terms(costs, alphas)?))
}

/// `M_e` with every angle set to 1: the plain population variance.
pub fn m_e_unweighted(costs: &[f64]) -> Result<f64> {
    m_e(costs, &vec![1.0; costs.len()])
}

pub fn report(inputs: &FairnessInputs) -> Result<FairnessReport> {
    let uniq = uniqueness(&inputs.alphas, &inputs.remaining)?;
    let m_p_terms = m_p_terms(&inputs.delta_y, &uniq, inputs.epsilon)?;
    let m_e_terms = m_e_terms(&inputs.costs, &inputs.alphas)?;
    Ok(FairnessReport {
        m_p: mean(&m_p_terms),
        m_e: mean(&m_e_terms),
        uniqueness: uniq,
        m_p_terms,
        m_e_terms,
    })
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Exhaustive search for the assignment of accuracy drops to clients that
/// minimizes `M_p`. Entry `i` of the result is the index into `delta_y`
/// given to client `i`; the first minimizer in lexicographic order wins.
pub fn rank_alignment_oracle(delta_y: &[f64], uniq: &[f64], eps: f64) -> Result<Vec<usize>> {
    let n = delta_y.len();
    if n > ORACLE_LIMIT {
        return Err(Error::SizeLimit {
            n,
            limit: ORACLE_LIMIT,
        });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = (f64::INFINITY, perm.clone());
    loop {
        let assigned: Vec<f64> = perm.iter().map(|&i| delta_y[i]).collect();
        let score = m_p_from_values(&assigned, uniq, eps)?;
        if score < best.0 {
            best = (score, perm.clone());
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(best.1)
}
