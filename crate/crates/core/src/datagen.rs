//! Synthetic data, CSV ingestion and label-Dirichlet client partitioning.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Dataset;
use crate::rng;

const DOMAIN_MEANS: u64 = 10;
const DOMAIN_NOISE: u64 = 11;
const DOMAIN_PARTITION: u64 = 12;
const DOMAIN_SPLIT: u64 = 13;
const DOMAIN_GROUPS: u64 = 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic,
    Csv { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub input_dim: usize,
    pub num_labels: usize,
    pub samples_per_client: usize,
    /// Dirichlet concentration; lower means more skewed label profiles.
    pub concentration: f64,
    pub class_separation: f64,
    pub noise_scale: f64,
    pub seed: u64,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            input_dim: 8,
            num_labels: 4,
            samples_per_client: 40,
            concentration: 0.5,
            class_separation: 3.0,
            noise_scale: 1.0,
            seed: 1,
            test_fraction: 0.25,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("data input_dim must be >= 1".into()));
        }
        if self.num_labels < 2 {
            return Err(Error::Config("data num_labels must be >= 2".into()));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(Error::Config("Dirichlet concentration must be > 0".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config("test_fraction must lie in (0, 1)".into()));
        }
        if self.samples_per_client < 2 {
            return Err(Error::Config(
                "samples_per_client must be >= 2 so every client keeps a train and a test sample"
                    .into(),
            ));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return Err(Error::Config("class_separation must be > 0".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config("noise_scale must be >= 0".into()));
        }
        Ok(())
    }
}

/// One client's local data, split into a training part and a held-out part.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientData {
    pub client_id: usize,
    pub train: Dataset,
    pub test: Dataset,
}

/// Class means: one point per label on the sphere of radius `class_separation`.
fn class_means(config: &DataConfig) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(config.seed, &[DOMAIN_MEANS]);
    (0..config.num_labels)
        .map(|_| {
            let mut v: Vec<f64> = (0..config.input_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            // a zero draw has probability zero; fall back to the first axis anyway
            if norm == 0.0 {
                v[0] = 1.0;
            } else {
                v.iter_mut().for_each(|x| *x /= norm);
            }
            v.iter_mut().for_each(|x| *x *= config.class_separation);
            v
        })
        .collect()
}

/// `n` samples from Gaussian clusters, labels cycling through all labels.
pub fn gen_synthetic(config: &DataConfig, n: usize) -> Result<Dataset> {
    let labels: Vec<usize> = (0..config.num_labels).collect();
    gen_synthetic_labels(config, n, &labels, 0)
}

/// Like [`gen_synthetic`], with labels cycling through `labels` only.
///
/// Class means are shared across calls with the same config; `stream` keys
/// the noise so different calls draw independent samples.
pub fn gen_synthetic_labels(
    config: &DataConfig,
    n: usize,
    labels: &[usize],
    stream: u64,
) -> Result<Dataset> {
    config.validate()?;
    if labels.is_empty() || labels.iter().any(|&l| l >= config.num_labels) {
        return Err(Error::invalid(
            "label subset must be nonempty and within range",
        ));
    }
    let means = class_means(config);
    let mut rng = rng::stream(config.seed, &[DOMAIN_NOISE, stream]);
    let mut data = Dataset::empty(config.input_dim);
    let mut row = vec![0.0; config.input_dim];
    for i in 0..n {
        let y = labels[i % labels.len()];
        for (r, m) in row.iter_mut().zip(&means[y]) {
            let z: f64 = rng.sample(StandardNormal);
            *r = m + config.noise_scale * z;
        }
        data.push(&row, y);
    }
    Ok(data)
}

/// Splits `total` into integer parts proportional to `weights`.
///
/// Floors first, then hands the remaining units to the largest fractional
/// parts, lowest index first on ties.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if sum <= 0.0 {
        let mut out = vec![0; weights.len()];
        out[0] = total;
        return out;
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

fn dirichlet_sample<R: Rng>(rng: &mut R, concentration: f64, dim: usize) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("concentration validated > 0");
    let mut v: Vec<f64> = (0..dim).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = v.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        v.iter_mut().for_each(|x| *x /= sum);
    } else {
        // every gamma draw underflowed; put the mass on one uniformly chosen label
        v.iter_mut().for_each(|x| *x = 0.0);
        v[rng.random_range(0..dim)] = 1.0;
    }
    v
}

/// Label-Dirichlet partition of `dataset` over `k` clients.
///
/// Each client gets an equal share of the samples (up to rounding) and a
/// label profile drawn from `Dirichlet(concentration * 1)`. Targets per label
/// use largest-remainder rounding; when a label is oversubscribed its supply
/// is split proportionally to demand, and any shortfall is then filled from
/// the client's most preferred labels that still have samples.
pub fn dirichlet_partition(
    dataset: &Dataset,
    k: usize,
    concentration: f64,
    seed: u64,
) -> Result<Vec<Dataset>> {
    if k == 0 {
        return Err(Error::invalid("client count must be >= 1"));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("cannot partition an empty dataset"));
    }
    if k > dataset.len() {
        return Err(Error::invalid(format!(
            "{k} clients requested for only {} samples",
            dataset.len()
        )));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::invalid("Dirichlet concentration must be > 0"));
    }
    let mut rng = rng::stream(seed, &[DOMAIN_PARTITION]);

    // profiles range over the labels actually present, in ascending order
    let mut present: Vec<usize> = dataset.labels().to_vec();
    present.sort_unstable();
    present.dedup();
    let num_labels = present.len();
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); num_labels];
    for i in 0..dataset.len() {
        let slot = present
            .binary_search(&dataset.label(i))
            .expect("label collected above");
        pools[slot].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }

    let sizes = largest_remainder(dataset.len(), &vec![1.0; k]);
    let profiles: Vec<Vec<f64>> = (0..k)
        .map(|_| dirichlet_sample(&mut rng, concentration, num_labels))
        .collect();
    let targets: Vec<Vec<usize>> = sizes
        .iter()
        .zip(&profiles)
        .map(|(&n, p)| largest_remainder(n, p))
        .collect();

    let mut grants = vec![vec![0usize; num_labels]; k];
    for label in 0..num_labels {
        let demand: Vec<usize> = targets.iter().map(|t| t[label]).collect();
        let total: usize = demand.iter().sum();
        let supply = pools[label].len();
        let granted = if total <= supply {
            demand
        } else {
            let w: Vec<f64> = demand.iter().map(|&d| d as f64).collect();
            largest_remainder(supply, &w)
        };
        for c in 0..k {
            grants[c][label] = granted[c];
        }
    }

    let mut cursor = vec![0usize; num_labels];
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); k];
    for c in 0..k {
        for label in 0..num_labels {
            let take = grants[c][label];
            assigned[c].extend_from_slice(&pools[label][cursor[label]..cursor[label] + take]);
            cursor[label] += take;
        }
    }
    for c in 0..k {
        let mut preference: Vec<usize> = (0..num_labels).collect();
        preference.sort_by(|&a, &b| {
            profiles[c][b]
                .partial_cmp(&profiles[c][a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for label in preference {
            let missing = sizes[c] - assigned[c].len();
            if missing == 0 {
                break;
            }
            let take = missing.min(pools[label].len() - cursor[label]);
            assigned[c].extend_from_slice(&pools[label][cursor[label]..cursor[label] + take]);
            cursor[label] += take;
        }
        debug_assert_eq!(assigned[c].len(), sizes[c]);
    }
    Ok(assigned.iter().map(|idx| dataset.subset(idx)).collect())
}

/// Mean over clients of the largest single-label share.
pub fn mean_top_label_share(parts: &[Dataset], num_labels: usize) -> f64 {
    let shares: Vec<f64> = parts
        .iter()
        .filter(|d| !d.is_empty())
        .map(|d| *d.label_histogram(num_labels).iter().max().unwrap() as f64 / d.len() as f64)
        .collect();
    shares.iter().sum::<f64>() / shares.len() as f64
}

/// Seeded shuffle, then the first `round(n * test_fraction)` rows (clamped to
/// `[1, n-1]`) become the test part.
pub fn split_train_test(
    data: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if data.len() < 2 {
        return Err(Error::invalid("need at least 2 samples to split"));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid("test_fraction must lie in (0, 1)"));
    }
    let n = data.len();
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[DOMAIN_SPLIT]));
    let test = data.subset(&order[..n_test]);
    let train = data.subset(&order[n_test..]);
    Ok((train, test))
}

/// Reads `label,f1,...,fd` rows.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.len() < 2 || header.get(0).map(str::trim) != Some("label") {
        return Err(Error::Schema(format!(
            "{}: header must be `label,f1,...,fd`",
            path.display()
        )));
    }
    let dim = header.len() - 1;
    let mut data = Dataset::empty(dim);
    let mut row = vec![0.0; dim];
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != dim + 1 {
            return Err(Error::Schema(format!(
                "{}: line {line} has {} fields, header declares {}",
                path.display(),
                record.len(),
                dim + 1
            )));
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let label: usize = record[0].trim().parse().map_err(|_| {
            parse_err(format!(
                "label `{}` is not a nonnegative integer",
                &record[0]
            ))
        })?;
        for (j, slot) in row.iter_mut().enumerate() {
            let field = record[j + 1].trim();
            *slot = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    parse_err(format!(
                        "feature f{} `{field}` is not a finite number",
                        j + 1
                    ))
                })?;
        }
        data.push(&row, label);
    }
    Ok(data)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["label".to_string()];
    header.extend((1..=data.dim()).map(|j| format!("f{j}")));
    writer
        .write_record(&header)
        .map_err(|e| csv_error(path, e))?;
    for i in 0..data.len() {
        let mut rec = vec![data.label(i).to_string()];
        // Display for f64 prints the shortest string that parses back exactly
        rec.extend(data.row(i).iter().map(|v| v.to_string()));
        writer.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    writer.flush()?;
    Ok(())
}

fn split_clients(
    parts: Vec<Dataset>,
    config: &DataConfig,
    id_offset: usize,
) -> Result<Vec<ClientData>> {
    parts
        .into_iter()
        .enumerate()
        .map(|(i, part)| {
            let client_id = id_offset + i;
            let seed = rng::derive_seed(config.seed, &[DOMAIN_SPLIT, client_id as u64]);
            let (train, test) = split_train_test(&part, config.test_fraction, seed)?;
            Ok(ClientData {
                client_id,
                train,
                test,
            })
        })
        .collect()
}

/// The standard population: `k` clients with Dirichlet label profiles.
pub fn build_clients(config: &DataConfig, k: usize) -> Result<Vec<ClientData>> {
    config.validate()?;
    let data = match &config.source {
        DataSource::Synthetic => gen_synthetic(config, k * config.samples_per_client)?,
        DataSource::Csv { path } => {
            let data = load_csv(path)?;
            if data.dim() != config.input_dim {
                return Err(Error::Schema(format!(
                    "{} has {} features, config declares {}",
                    path.display(),
                    data.dim(),
                    config.input_dim
                )));
            }
            if let Some(&bad) = data.labels().iter().find(|&&l| l >= config.num_labels) {
                return Err(Error::Schema(format!(
                    "{} has label {bad}, config declares {} labels",
                    path.display(),
                    config.num_labels
                )));
            }
            data
        }
    };
    if data.len() < 2 * k {
        return Err(Error::invalid(format!(
            "{} samples cannot give {k} clients two samples each",
            data.len()
        )));
    }
    let parts = dirichlet_partition(&data, k, config.concentration, config.seed)?;
    split_clients(parts, config, 0)
}

/// Two disjoint label groups: clients `0..majority` draw from the first group,
/// the remaining `minority` clients from the second. Labels are assigned to
/// groups by a seeded shuffle; the second group gets `num_labels / 2` labels.
#[derive(Clone, Debug)]
pub struct GroupedPopulation {
    pub clients: Vec<ClientData>,
    pub majority_labels: Vec<usize>,
    pub minority_labels: Vec<usize>,
    pub minority_ids: Vec<usize>,
}

pub fn build_label_groups(
    config: &DataConfig,
    majority: usize,
    minority: usize,
) -> Result<GroupedPopulation> {
    config.validate()?;
    if majority == 0 || minority == 0 {
        return Err(Error::invalid("both label groups need at least one client"));
    }
    let mut labels: Vec<usize> = (0..config.num_labels).collect();
    labels.shuffle(&mut rng::stream(config.seed, &[DOMAIN_GROUPS]));
    let split = config.num_labels - config.num_labels / 2;
    let mut majority_labels = labels[..split].to_vec();
    let mut minority_labels = labels[split..].to_vec();
    majority_labels.sort_unstable();
    minority_labels.sort_unstable();

    let n = config.samples_per_client;
    let major = gen_synthetic_labels(config, majority * n, &majority_labels, 1)?;
    let minor = gen_synthetic_labels(config, minority * n, &minority_labels, 2)?;
    let seed_major = rng::derive_seed(config.seed, &[DOMAIN_GROUPS, 1]);
    let seed_minor = rng::derive_seed(config.seed, &[DOMAIN_GROUPS, 2]);
    let mut clients = split_clients(
        dirichlet_partition(&major, majority, config.concentration, seed_major)?,
        config,
        0,
    )?;
    clients.extend(split_clients(
        dirichlet_partition(&minor, minority, config.concentration, seed_minor)?,
        config,
        majority,
    )?);
    Ok(GroupedPopulation {
        clients,
        majority_labels,
        minority_labels,
        minority_ids: (majority..majority + minority).collect(),
    })
}
