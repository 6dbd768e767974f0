//! Minimal deterministic model core.
//!
//! Two model families are supported: a softmax linear classifier and a
//! one-hidden-layer perceptron. Parameters live in a flat [`ParamVector`]
//! whose layout is fixed by the [`ModelSpec`]: every layer's weight matrix
//! (row-major, `out x in`) in layer order, followed by every layer's bias
//! vector in layer order.
//!
//! All routines are pure. Summations run in ascending sample and index order,
//! so identical inputs give bit-identical outputs.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation value.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    Linear,
    Mlp {
        hidden: usize,
        activation: Activation,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub num_labels: usize,
}

/// Offsets of each block inside the flat parameter vector.
#[derive(Clone, Copy, Debug)]
struct Layout {
    d: usize,
    l: usize,
    /// Hidden width; zero for the linear model.
    h: usize,
    w1: usize,
    w2: usize,
    b1: usize,
    b2: usize,
    len: usize,
}

impl ModelSpec {
    pub fn linear(input_dim: usize, num_labels: usize) -> Self {
        ModelSpec {
            architecture: Architecture::Linear,
            input_dim,
            num_labels,
        }
    }

    pub fn mlp(input_dim: usize, num_labels: usize, hidden: usize, activation: Activation) -> Self {
        ModelSpec {
            architecture: Architecture::Mlp { hidden, activation },
            input_dim,
            num_labels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("model input_dim must be >= 1"));
        }
        if self.num_labels < 2 {
            return Err(Error::invalid("model num_labels must be >= 2"));
        }
        if let Architecture::Mlp { hidden, .. } = self.architecture {
            if hidden == 0 {
                return Err(Error::invalid("mlp hidden width must be >= 1"));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layout().len
    }

    fn layout(&self) -> Layout {
        let (d, l) = (self.input_dim, self.num_labels);
        match self.architecture {
            Architecture::Linear => Layout {
                d,
                l,
                h: 0,
                w1: 0,
                w2: 0,
                b1: d * l,
                b2: d * l,
                len: d * l + l,
            },
            Architecture::Mlp { hidden: h, .. } => {
                let w2 = h * d;
                let b1 = w2 + l * h;
                let b2 = b1 + h;
                Layout {
                    d,
                    l,
                    h,
                    w1: 0,
                    w2,
                    b1,
                    b2,
                    len: b2 + l,
                }
            }
        }
    }
}

/// Flat model parameters in the canonical layout of a [`ModelSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    /// Wraps `values`, rejecting non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("parameter {i} is not finite")));
        }
        Ok(ParamVector(values))
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        debug_assert_eq!(self.len(), other.len());
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    /// SHA-256 of the little-endian bytes, hex encoded.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in &self.0 {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    /// Bit-level equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &ParamVector) -> bool {
        self.len() == other.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Weighted mean `sum(w_i * theta_i) / sum(w_i)`, accumulated in slice order.
///
/// A single input is returned unchanged rather than as `w * theta / w`.
pub fn weighted_mean<'a, I>(items: I) -> Result<ParamVector>
where
    I: IntoIterator<Item = (f64, &'a ParamVector)>,
{
    let items: Vec<(f64, &ParamVector)> = items.into_iter().collect();
    if let [(w, theta)] = items.as_slice() {
        if *w <= 0.0 {
            return Err(Error::invalid(
                "aggregation weights must sum to a positive value",
            ));
        }
        return Ok((*theta).clone());
    }
    let mut acc: Option<Vec<f64>> = None;
    let mut total = 0.0;
    for (w, theta) in items {
        let acc = acc.get_or_insert_with(|| vec![0.0; theta.len()]);
        if acc.len() != theta.len() {
            return Err(Error::invalid("parameter length mismatch in aggregation"));
        }
        for (a, t) in acc.iter_mut().zip(theta.as_slice()) {
            *a += w * t;
        }
        total += w;
    }
    let mut acc = acc.ok_or_else(|| Error::invalid("cannot aggregate an empty model list"))?;
    if total <= 0.0 {
        return Err(Error::invalid(
            "aggregation weights must sum to a positive value",
        ));
    }
    for a in &mut acc {
        *a /= total;
    }
    Ok(ParamVector(acc))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A labeled sample collection with a fixed feature width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature width must be >= 1"));
        }
        if features.len() != dim * labels.len() {
            return Err(Error::invalid(format!(
                "feature buffer of length {} does not hold {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Dataset {
            dim,
            features,
            labels,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Dataset {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn push(&mut self, row: &[f64], label: usize) {
        assert_eq!(row.len(), self.dim, "row width");
        self.features.extend_from_slice(row);
        self.labels.push(label);
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::empty(self.dim);
        for &i in indices {
            out.push(self.row(i), self.label(i));
        }
        out
    }

    pub fn extend(&mut self, other: &Dataset) {
        assert_eq!(other.dim, self.dim, "row width");
        self.features.extend_from_slice(&other.features);
        self.labels.extend_from_slice(&other.labels);
    }

    /// Per-label sample counts, `num_labels` long.
    pub fn label_histogram(&self, num_labels: usize) -> Vec<usize> {
        let mut h = vec![0; num_labels];
        for &y in &self.labels {
            if y < num_labels {
                h[y] += 1;
            }
        }
        h
    }

    fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        if self.dim != spec.input_dim {
            return Err(Error::invalid(format!(
                "feature width {} does not match model input_dim {}",
                self.dim, spec.input_dim
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= spec.num_labels) {
            return Err(Error::invalid(format!(
                "label {bad} outside [0, {})",
                spec.num_labels
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub sample_count: usize,
}

/// Draws `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for every entry, per layer.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamVector> {
    spec.validate()?;
    let lay = spec.layout();
    let mut rng = rng::stream(seed, &[rng::DOMAIN_INIT]);
    let mut values = vec![0.0; lay.len];
    let mut fill =
        |range: std::ops::Range<usize>, fan_in: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut values[range] {
                *v = rng.random_range(-bound..bound);
            }
        };
    match spec.architecture {
        Architecture::Linear => {
            fill(0..lay.b1, lay.d, &mut rng);
            fill(lay.b1..lay.len, lay.d, &mut rng);
        }
        Architecture::Mlp { .. } => {
            fill(lay.w1..lay.w2, lay.d, &mut rng);
            fill(lay.w2..lay.b1, lay.h, &mut rng);
            fill(lay.b1..lay.b2, lay.d, &mut rng);
            fill(lay.b2..lay.len, lay.h, &mut rng);
        }
    }
    Ok(ParamVector(values))
}

/// Per-sample scratch buffers for the forward/backward pass.
struct Scratch {
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    dhidden: Vec<f64>,
}

impl Scratch {
    fn new(lay: &Layout) -> Self {
        Scratch {
            hidden_pre: vec![0.0; lay.h],
            hidden: vec![0.0; lay.h],
            logits: vec![0.0; lay.l],
            dhidden: vec![0.0; lay.h],
        }
    }
}

fn forward(spec: &ModelSpec, lay: &Layout, p: &[f64], x: &[f64], s: &mut Scratch) {
    match spec.architecture {
        Architecture::Linear => {
            for k in 0..lay.l {
                let row = &p[k * lay.d..(k + 1) * lay.d];
                s.logits[k] = dot(row, x) + p[lay.b1 + k];
            }
        }
        Architecture::Mlp { activation, .. } => {
            for j in 0..lay.h {
                let row = &p[lay.w1 + j * lay.d..lay.w1 + (j + 1) * lay.d];
                s.hidden_pre[j] = dot(row, x) + p[lay.b1 + j];
                s.hidden[j] = activation.apply(s.hidden_pre[j]);
            }
            for k in 0..lay.l {
                let row = &p[lay.w2 + k * lay.h..lay.w2 + (k + 1) * lay.h];
                s.logits[k] = dot(row, &s.hidden) + p[lay.b2 + k];
            }
        }
    }
}

/// Turns `logits` into probabilities in place; returns `-ln p[label]`.
fn softmax_xent(logits: &mut [f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted_label = logits[label] - max;
    let mut z = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in logits.iter_mut() {
        *v /= z;
    }
    z.ln() - shifted_label
}

/// Mean softmax cross-entropy and its analytic gradient.
pub fn loss_and_grad(
    params: &ParamVector,
    data: &Dataset,
    spec: &ModelSpec,
) -> Result<(f64, ParamVector)> {
    let lay = check_inputs(params, data, spec)?;
    let p = params.as_slice();
    let mut grad = vec![0.0; lay.len];
    let mut loss = 0.0;
    let mut s = Scratch::new(&lay);
    for i in 0..data.len() {
        let x = data.row(i);
        let y = data.label(i);
        forward(spec, &lay, p, x, &mut s);
        loss += softmax_xent(&mut s.logits, y);
        // s.logits now holds probabilities; turn it into dL/dlogits
        s.logits[y] -= 1.0;
        match spec.architecture {
            Architecture::Linear => {
                for k in 0..lay.l {
                    let g = s.logits[k];
                    let row = &mut grad[k * lay.d..(k + 1) * lay.d];
                    for (r, xj) in row.iter_mut().zip(x) {
                        *r += g * xj;
                    }
                    grad[lay.b1 + k] += g;
                }
            }
            Architecture::Mlp { activation, .. } => {
                s.dhidden.iter_mut().for_each(|v| *v = 0.0);
                for k in 0..lay.l {
                    let g = s.logits[k];
                    let base = lay.w2 + k * lay.h;
                    for j in 0..lay.h {
                        grad[base + j] += g * s.hidden[j];
                        s.dhidden[j] += g * p[base + j];
                    }
                    grad[lay.b2 + k] += g;
                }
                for j in 0..lay.h {
                    let g = s.dhidden[j] * activation.derivative(s.hidden_pre[j]);
                    let base = lay.w1 + j * lay.d;
                    for (r, xj) in grad[base..base + lay.d].iter_mut().zip(x) {
                        *r += g * xj;
                    }
                    grad[lay.b1 + j] += g;
                }
            }
        }
    }
    let n = data.len() as f64;
    for g in &mut grad {
        *g /= n;
    }
    Ok((loss / n, ParamVector(grad)))
}

fn check_inputs(params: &ParamVector, data: &Dataset, spec: &ModelSpec) -> Result<Layout> {
    spec.validate()?;
    let lay = spec.layout();
    if params.len() != lay.len {
        return Err(Error::invalid(format!(
            "parameter vector has length {}, model expects {}",
            params.len(),
            lay.len
        )));
    }
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    data.check_against(spec)?;
    Ok(lay)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BatchMode {
    /// One gradient step on the whole local dataset per step.
    FullBatch,
    /// Steps over seeded shuffles of the local dataset, `batch_size` rows each.
    MiniBatch { batch_size: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: BatchMode,
}

impl LocalTrainConfig {
    pub fn full_batch(steps: usize, lr: f64) -> Self {
        LocalTrainConfig {
            steps,
            lr,
            batch: BatchMode::FullBatch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("local steps must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and >= 0"));
        }
        if let BatchMode::MiniBatch { batch_size } = self.batch {
            if batch_size == 0 {
                return Err(Error::invalid("mini-batch size must be >= 1"));
            }
        }
        Ok(())
    }
}

/// Runs `cfg.steps` descent steps from `params` on `data`.
///
/// `seed` only matters in mini-batch mode, where it keys the sample order.
pub fn local_train(
    params: &ParamVector,
    data: &Dataset,
    cfg: &LocalTrainConfig,
    spec: &ModelSpec,
    seed: u64,
) -> Result<ParamVector> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    check_inputs(params, data, spec)?;
    let mut theta = params.clone();
    match cfg.batch {
        BatchMode::FullBatch => {
            for _ in 0..cfg.steps {
                let (_, g) = loss_and_grad(&theta, data, spec)?;
                step(&mut theta, &g, cfg.lr);
            }
        }
        BatchMode::MiniBatch { batch_size } => {
            let mut rng = rng::from_seed(seed);
            let mut order: Vec<usize> = (0..data.len()).collect();
            let mut cursor = order.len();
            for _ in 0..cfg.steps {
                if cursor >= order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let end = (cursor + batch_size).min(order.len());
                let batch = data.subset(&order[cursor..end]);
                cursor = end;
                let (_, g) = loss_and_grad(&theta, &batch, spec)?;
                step(&mut theta, &g, cfg.lr);
            }
        }
    }
    if !theta.is_finite() {
        return Err(Error::Diverged(format!("{} local steps", cfg.steps)));
    }
    Ok(theta)
}

fn step(theta: &mut ParamVector, grad: &ParamVector, lr: f64) {
    for (t, g) in theta.0.iter_mut().zip(grad.as_slice()) {
        *t -= lr * g;
    }
}

/// Angle in `[0, pi]` between two nonzero vectors.
pub fn angle_between(u: &ParamVector, v: &ParamVector) -> Result<f64> {
    angle_between_slices(u.as_slice(), v.as_slice())
}

pub(crate) fn angle_between_slices(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::invalid("angle between vectors of different length"));
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateVector("zero-norm vector has no direction"));
    }
    // 2 atan2(|a - b|, |a + b|) on unit vectors stays accurate near 0 and pi
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in u.iter().zip(v) {
        let (a, b) = (x / nu, y / nv);
        diff += (a - b) * (a - b);
        sum += (a + b) * (a + b);
    }
    Ok(2.0 * diff.sqrt().atan2(sum.sqrt()))
}

/// Argmax accuracy (ties go to the lowest label) and mean loss.
pub fn evaluate(params: &ParamVector, data: &Dataset, spec: &ModelSpec) -> Result<EvalReport> {
    let lay = check_inputs(params, data, spec)?;
    let p = params.as_slice();
    let mut s = Scratch::new(&lay);
    let mut correct = 0usize;
    let mut loss = 0.0;
    for i in 0..data.len() {
        forward(spec, &lay, p, data.row(i), &mut s);
        let mut best = 0;
        for k in 1..lay.l {
            if s.logits[k] > s.logits[best] {
                best = k;
            }
        }
        if best == data.label(i) {
            correct += 1;
        }
        loss += softmax_xent(&mut s.logits, data.label(i));
    }
    Ok(EvalReport {
        accuracy: correct as f64 / data.len() as f64,
        mean_loss: loss / data.len() as f64,
        sample_count: data.len(),
    })
}
