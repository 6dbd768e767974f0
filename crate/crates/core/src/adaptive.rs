//! Direction-aware shard merging and variance-based round allocation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Spread below which a set of scalars is treated as constant.
const FLAT: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundRange {
    pub t0_star: usize,
    pub t1_star: usize,
}

impl Default for RoundRange {
    fn default() -> Self {
        RoundRange {
            t0_star: 4,
            t1_star: 7,
        }
    }
}

impl RoundRange {
    pub fn validate(&self) -> Result<()> {
        if self.t0_star == 0 || self.t0_star > self.t1_star {
            return Err(Error::Config(format!(
                "round range [{}, {}] must satisfy 1 <= T0* <= T1*",
                self.t0_star, self.t1_star
            )));
        }
        Ok(())
    }

    /// Round-half-up midpoint, used when every shard looks alike.
    pub fn midpoint(&self) -> usize {
        (self.t0_star + self.t1_star).div_ceil(2)
    }
}

/// Groups of previous-stage shard positions, one group per new shard.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergePlan {
    pub groups: Vec<Vec<usize>>,
}

impl MergePlan {
    /// Checks that the groups partition `0..n` with at most `r` members each.
    pub fn check(&self, n: usize, r: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for g in &self.groups {
            if g.is_empty() || g.len() > r {
                return Err(Error::invalid(format!(
                    "merge group of size {} (R = {r})",
                    g.len()
                )));
            }
            for &i in g {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::invalid(format!(
                        "shard {i} missing or assigned twice"
                    )));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("merge plan leaves a shard unassigned"));
        }
        Ok(())
    }
}

fn is_flat(values: &[f64]) -> bool {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    hi - lo < FLAT
}

/// Scalar k-means with three clusters, ordered by ascending centroid.
///
/// Centroids start at the 1/6, 3/6 and 5/6 quantiles of the sorted input.
/// Assignment ties go to the lower cluster. Constant input puts everything
/// in the middle cluster.
pub fn cluster_shards(alphas: &[f64]) -> [Vec<usize>; 3] {
    let n = alphas.len();
    if n == 0 {
        return [Vec::new(), Vec::new(), Vec::new()];
    }
    if is_flat(alphas) {
        return [Vec::new(), (0..n).collect(), Vec::new()];
    }
    let mut sorted = alphas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |num: usize| sorted[((num as f64 / 6.0) * n as f64).floor() as usize];
    let mut centroids = [q(1), q(3), q(5)];
    let mut assign = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, &a) in alphas.iter().enumerate() {
            let mut best = 0;
            for k in 1..3 {
                if (a - centroids[k]).abs() < (a - centroids[best]).abs() {
                    best = k;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        for (k, c) in centroids.iter_mut().enumerate() {
            let members: Vec<f64> = (0..n)
                .filter(|&i| assign[i] == k)
                .map(|i| alphas[i])
                .collect();
            if !members.is_empty() {
                *c = members.iter().sum::<f64>() / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| centroids[a].total_cmp(&centroids[b]).then(a.cmp(&b)));
    let mut out: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (slot, &k) in order.iter().enumerate() {
        out[slot] = (0..n).filter(|&i| assign[i] == k).collect();
    }
    out
}

/// Seeded shuffle chunked into groups of `r`.
pub fn random_merge(n: usize, r: usize, seed: u64, stage: usize) -> MergePlan {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::DOMAIN_MERGE, stage as u64]));
    MergePlan {
        groups: order
            .chunks(r)
            .map(|c| {
                let mut g = c.to_vec();
                g.sort_unstable();
                g
            })
            .collect(),
    }
}

struct Groups<'a> {
    members: Vec<Vec<usize>>,
    capacity: Vec<usize>,
    clients: Vec<usize>,
    alphas: &'a [f64],
    sizes: &'a [usize],
}

impl Groups<'_> {
    /// The non-full group with the fewest members, lowest index on ties.
    fn smallest_open(&self) -> Option<usize> {
        (0..self.members.len())
            .filter(|&g| self.members[g].len() < self.capacity[g])
            .min_by_key(|&g| (self.members[g].len(), g))
    }

    fn mean_alpha(&self, g: usize) -> f64 {
        let m = &self.members[g];
        if m.is_empty() {
            0.0
        } else {
            m.iter().map(|&i| self.alphas[i]).sum::<f64>() / m.len() as f64
        }
    }

    /// Candidate whose addition to group `g` leaves the smallest spread of
    /// client totals across groups; lowest shard index on ties.
    fn best_candidate(&self, g: usize, candidates: &[usize]) -> usize {
        let spread = |c: usize| {
            let totals =
                self.clients
                    .iter()
                    .enumerate()
                    .map(|(j, &t)| if j == g { t + self.sizes[c] } else { t });
            let (lo, hi) = totals.fold((usize::MAX, 0), |(lo, hi), t| (lo.min(t), hi.max(t)));
            hi - lo
        };
        let mut best = 0;
        for k in 1..candidates.len() {
            let (a, b) = (spread(candidates[k]), spread(candidates[best]));
            if a < b || (a == b && candidates[k] < candidates[best]) {
                best = k;
            }
        }
        best
    }

    fn place(&mut self, g: usize, pool: &mut Vec<usize>) {
        let k = self.best_candidate(g, pool);
        let shard = pool.remove(k);
        self.members[g].push(shard);
        self.clients[g] += self.sizes[shard];
    }
}

/// Direction-aware merge of `alphas.len()` shards into `ceil(n / r)` groups.
///
/// `alphas` are the signed shard angles of the previous stage and `sizes`
/// their client counts. Near-average shards are spread first, then negative
/// and positive shards are added so each group's mean angle is pulled back
/// toward zero. Constant angles (the first merge) fall back to a seeded
/// random partition.
pub fn merge_shards_a1(
    alphas: &[f64],
    sizes: &[usize],
    r: usize,
    seed: u64,
    stage: usize,
) -> Result<MergePlan> {
    let n = alphas.len();
    if r < 2 {
        return Err(Error::invalid("merge rate must be >= 2"));
    }
    if n == 0 || sizes.len() != n {
        return Err(Error::invalid(
            "merge needs one size per shard and at least one shard",
        ));
    }
    if is_flat(alphas) {
        return Ok(random_merge(n, r, seed, stage));
    }
    let n_groups = n.div_ceil(r);
    let mut capacity = vec![r; n_groups];
    capacity[n_groups - 1] = n - (n_groups - 1) * r;
    let mut groups = Groups {
        members: vec![Vec::new(); n_groups],
        capacity,
        clients: vec![0; n_groups],
        alphas,
        sizes,
    };
    let [mut negative, mut middle, mut positive] = cluster_shards(alphas);
    while !middle.is_empty() {
        let g = groups.smallest_open().expect("capacity covers every shard");
        groups.place(g, &mut middle);
    }
    while !negative.is_empty() || !positive.is_empty() {
        let g = groups.smallest_open().expect("capacity covers every shard");
        let wants_negative = groups.mean_alpha(g) >= 0.0;
        let pool = match (wants_negative, negative.is_empty(), positive.is_empty()) {
            (true, false, _) | (false, false, true) => &mut negative,
            _ => &mut positive,
        };
        groups.place(g, pool);
    }
    for g in &mut groups.members {
        g.sort_unstable();
    }
    Ok(MergePlan {
        groups: groups.members,
    })
}

/// Population variance.
pub fn variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Rounds for each new shard from the variance of its children's angles.
///
/// Lowest variance gets `T1*`, highest gets `T0*`, linear in between with
/// round-half-up. When every variance is the same, every shard gets the
/// midpoint.
pub fn allocate_rounds_a2(child_alphas: &[Vec<f64>], range: RoundRange) -> Result<Vec<usize>> {
    range.validate()?;
    let vars: Vec<f64> = child_alphas.iter().map(|a| variance(a)).collect();
    Ok(rounds_from_variances(&vars, range))
}

pub fn rounds_from_variances(vars: &[f64], range: RoundRange) -> Vec<usize> {
    let lo = vars.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vars.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if vars.is_empty() || hi - lo < FLAT {
        return vec![range.midpoint(); vars.len()];
    }
    let (t0, t1) = (range.t0_star as f64, range.t1_star as f64);
    vars.iter()
        .map(|&v| {
            let t = t0 + (t1 - t0) * (hi - v) / (hi - lo);
            // the small slack keeps exact halves from rounding down after cancellation
            ((t + 0.5 + 1e-9).floor() as usize).clamp(range.t0_star, range.t1_star)
        })
        .collect()
}

/// The inverse-ratio allocation written as `T0* + (T1* - T0*) (max - min) / (v - min)`.
///
/// Kept for study only: it is at least `T1*` for every shard and infinite
/// for the lowest-variance shard.
pub fn inverse_ratio_rounds(v: f64, min: f64, max: f64, range: RoundRange) -> f64 {
    let (t0, t1) = (range.t0_star as f64, range.t1_star as f64);
    t0 + (t1 - t0) * (max - min) / (v - min)
}

/// `[min, max]` of observed convergence round counts, `[4, 7]` when none.
pub fn estimate_round_range(observed: Option<&[usize]>) -> RoundRange {
    match observed {
        Some(counts) if !counts.is_empty() => RoundRange {
            t0_star: (*counts.iter().min().unwrap()).max(1),
            t1_star: (*counts.iter().max().unwrap()).max(1),
        },
        _ => RoundRange::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_separated_points() {
        assert_eq!(
            cluster_shards(&[-0.5, 0.0, 0.5]),
            [vec![0], vec![1], vec![2]]
        );
        assert_eq!(
            cluster_shards(&[0.5, -0.5, 0.0]),
            [vec![1], vec![2], vec![0]]
        );
    }

    #[test]
    fn constant_input_goes_to_the_middle() {
        assert_eq!(
            cluster_shards(&[0.3; 4]),
            [vec![], vec![0, 1, 2, 3], vec![]]
        );
        assert_eq!(cluster_shards(&[1.0]), [vec![], vec![0], vec![]]);
    }

    /// Exhaustive search over all 3-way contiguous splits of the sorted values.
    fn brute_force_sizes(values: &[f64]) -> Vec<usize> {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let sse = |s: &[f64]| {
            if s.is_empty() {
                return 0.0;
            }
            let m = s.iter().sum::<f64>() / s.len() as f64;
            s.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
        };
        let mut best = (f64::INFINITY, vec![]);
        for i in 1..n {
            for j in i + 1..n {
                let cost = sse(&sorted[..i]) + sse(&sorted[i..j]) + sse(&sorted[j..]);
                if cost < best.0 {
                    best = (cost, vec![i, j - i, n - j]);
                }
            }
        }
        best.1
    }

    #[test]
    fn six_points_match_brute_force() {
        let a = [-0.4, -0.39, 0.01, 0.02, 0.41, 0.42];
        let sizes: Vec<usize> = cluster_shards(&a).iter().map(Vec::len).collect();
        assert_eq!(sizes, brute_force_sizes(&a));
        assert_eq!(sizes, vec![2, 2, 2]);
    }

    #[test]
    fn balanced_clusters_spread_over_groups() {
        let alphas = [-0.9, -0.8, -0.85, 0.01, -0.02, 0.0, 0.7, 0.75, 0.8];
        let plan = merge_shards_a1(&alphas, &[1; 9], 3, 0, 2).unwrap();
        plan.check(9, 3).unwrap();
        let clusters = cluster_shards(&alphas);
        for g in &plan.groups {
            for c in &clusters {
                assert_eq!(g.iter().filter(|i| c.contains(i)).count(), 1, "{plan:?}");
            }
        }
    }

    #[test]
    fn first_merge_is_seeded_random() {
        let a = merge_shards_a1(&[0.0; 8], &[1; 8], 2, 5, 1).unwrap();
        a.check(8, 2).unwrap();
        assert_eq!(a.groups.len(), 4);
        assert_eq!(a, merge_shards_a1(&[0.0; 8], &[1; 8], 2, 5, 1).unwrap());
        assert_ne!(a, merge_shards_a1(&[0.0; 8], &[1; 8], 2, 6, 1).unwrap());
    }

    #[test]
    fn uneven_count_leaves_one_short_group() {
        let alphas = [0.1, -0.2, 0.3, -0.4, 0.5];
        let plan = merge_shards_a1(&alphas, &[1, 2, 1, 2, 1], 2, 0, 1).unwrap();
        plan.check(5, 2).unwrap();
        let mut sizes: Vec<usize> = plan.groups.iter().map(Vec::len).collect();
        sizes.sort();
        assert_eq!(sizes, vec![1, 2, 2]);
    }

    #[test]
    fn a2_examples() {
        let r = RoundRange::default();
        assert_eq!(rounds_from_variances(&[0.01, 0.09, 0.05], r), vec![7, 4, 6]);
        assert_eq!(rounds_from_variances(&[0.2, 0.2], r), vec![6, 6]);
        assert_eq!(
            allocate_rounds_a2(&[vec![0.0, 0.0], vec![0.0, 1.0]], r).unwrap(),
            vec![7, 4]
        );
        assert!(inverse_ratio_rounds(0.05, 0.01, 0.09, r) >= 7.0);
        assert!(inverse_ratio_rounds(0.01, 0.01, 0.09, r).is_infinite());
    }

    #[test]
    fn round_range_estimates() {
        assert_eq!(
            estimate_round_range(Some(&[5, 5, 5])),
            RoundRange {
                t0_star: 5,
                t1_star: 5
            }
        );
        assert_eq!(
            estimate_round_range(Some(&[4, 5, 7])),
            RoundRange {
                t0_star: 4,
                t1_star: 7
            }
        );
        assert_eq!(
            estimate_round_range(None),
            RoundRange {
                t0_star: 4,
                t1_star: 7
            }
        );
    }
}
