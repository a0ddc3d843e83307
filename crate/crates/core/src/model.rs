//! Multiclass classifiers over sparse features with hand-derived gradients.
//!
//! Two families are supported: a softmax-linear model (`W`, `b`) and a
//! one-hidden-layer tanh MLP (`W1`, `b1`, `W2`, `b2`). Weight matrices are
//! stored row-major with shape `(out, in)`.
//!
//! The per-record log-likelihood excludes the weight-decay prior; the
//! decay term only enters the optimisation objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Layout, ParameterVector};

/// Floor applied to a class probability before taking its logarithm.
pub const PROB_FLOOR: f64 = 1e-300;

/// Sparse real vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseVector {
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseVector {
    pub fn new(indices: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::invalid("sparse vector index/value length mismatch"));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("sparse vector indices must be strictly increasing"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("sparse vector values must be finite"));
        }
        Ok(SparseVector { indices, values })
    }

    /// Builds from a dense slice, dropping exact zeros.
    pub fn from_dense(dense: &[f64]) -> Result<Self> {
        let (indices, values) = dense
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
            .unzip();
        SparseVector::new(indices, values)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// One past the largest index, or 0 when empty.
    pub fn dim_lower_bound(&self) -> usize {
        self.indices.last().map_or(0, |i| i + 1)
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }
}

/// A labelled training or test example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: u64,
    pub features: SparseVector,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    SoftmaxLinear,
    /// One hidden layer with tanh activation.
    Mlp1Hidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    /// L2 penalty coefficient, read as the precision of a Gaussian prior.
    pub weight_decay: f64,
}

impl ModelSpec {
    pub fn softmax_linear(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            family: ModelFamily::SoftmaxLinear,
            input_dim,
            hidden_dim: 0,
            num_classes,
            weight_decay: 0.0,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            family: ModelFamily::Mlp1Hidden,
            input_dim,
            hidden_dim,
            num_classes,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay must be a nonnegative finite number"));
        }
        match self.family {
            ModelFamily::SoftmaxLinear if self.hidden_dim != 0 => {
                Err(Error::invalid("softmax-linear requires hidden_dim = 0"))
            }
            ModelFamily::Mlp1Hidden if self.hidden_dim == 0 => {
                Err(Error::invalid("mlp-1-hidden requires hidden_dim > 0"))
            }
            _ => Ok(()),
        }
    }

    pub fn layout(&self) -> Layout {
        let (d, h, k) = (self.input_dim, self.hidden_dim, self.num_classes);
        match self.family {
            ModelFamily::SoftmaxLinear => Layout::contiguous([("W", vec![k, d]), ("b", vec![k])]),
            ModelFamily::Mlp1Hidden => Layout::contiguous([
                ("W1", vec![h, d]),
                ("b1", vec![h]),
                ("W2", vec![k, h]),
                ("b2", vec![k]),
            ]),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout().len()
    }

    /// Seeded initialisation: fan-in-scaled uniform weights, zero biases.
    pub fn init(&self, seed: u64) -> Result<ParameterVector> {
        self.validate()?;
        let layout = self.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; layout.len()];
        for t in layout.tensors() {
            if t.shape.len() == 2 {
                let bound = 1.0 / (t.shape[1] as f64).sqrt();
                for v in &mut values[t.range()] {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        ParameterVector::new(layout, values)
    }

    fn check(&self, theta: &ParameterVector, features: &SparseVector) -> Result<()> {
        let expected = self.layout();
        if theta.layout() != &expected {
            for (i, want) in expected.tensors().iter().enumerate() {
                let got = theta.layout().tensors().get(i);
                if got != Some(want) {
                    return Err(Error::DimensionMismatch {
                        tensor: want.name.clone(),
                        expected: want.len(),
                        got: got.map_or(0, |g| g.len()),
                    });
                }
            }
            return Err(Error::LayoutMismatch(
                "parameter vector has extra tensors".into(),
            ));
        }
        if features.dim_lower_bound() > self.input_dim {
            return Err(Error::DimensionMismatch {
                tensor: "features".into(),
                expected: self.input_dim,
                got: features.dim_lower_bound(),
            });
        }
        Ok(())
    }
}

/// Intermediate values of one forward pass.
struct Activations {
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

fn affine_sparse(w: &[f64], b: &[f64], in_dim: usize, x: &SparseVector) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(r, bias)| {
            let row = &w[r * in_dim..(r + 1) * in_dim];
            bias + x.iter().map(|(j, v)| row[j] * v).sum::<f64>()
        })
        .collect()
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v /= total;
    }
}

fn activations(spec: &ModelSpec, theta: &ParameterVector, x: &SparseVector) -> Activations {
    let v = theta.values();
    let layout = theta.layout().tensors();
    match spec.family {
        ModelFamily::SoftmaxLinear => {
            let (w, b) = (&v[layout[0].range()], &v[layout[1].range()]);
            let mut probs = affine_sparse(w, b, spec.input_dim, x);
            softmax_in_place(&mut probs);
            Activations {
                hidden: Vec::new(),
                probs,
            }
        }
        ModelFamily::Mlp1Hidden => {
            let w1 = &v[layout[0].range()];
            let b1 = &v[layout[1].range()];
            let w2 = &v[layout[2].range()];
            let b2 = &v[layout[3].range()];
            let mut hidden = affine_sparse(w1, b1, spec.input_dim, x);
            hidden.iter_mut().for_each(|a| *a = a.tanh());
            let h = spec.hidden_dim;
            let mut probs: Vec<f64> = b2
                .iter()
                .enumerate()
                .map(|(c, bias)| {
                    let row = &w2[c * h..(c + 1) * h];
                    bias + row.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            softmax_in_place(&mut probs);
            Activations { hidden, probs }
        }
    }
}

/// Softmax class probabilities for one feature vector.
pub fn forward(spec: &ModelSpec, theta: &ParameterVector, features: &SparseVector) -> Result<Vec<f64>> {
    spec.check(theta, features)?;
    Ok(activations(spec, theta, features).probs)
}

/// `log p(label | features, θ)`, with the probability floored at [`PROB_FLOOR`].
pub fn log_likelihood(spec: &ModelSpec, theta: &ParameterVector, record: &Record) -> Result<f64> {
    if record.label >= spec.num_classes {
        return Err(Error::invalid(format!(
            "record {} has label {} but the model has {} classes",
            record.id, record.label, spec.num_classes
        )));
    }
    let probs = forward(spec, theta, &record.features)?;
    Ok(probs[record.label].max(PROB_FLOOR).ln())
}

/// Index of the most probable class; ties go to the lowest index.
pub fn predict(spec: &ModelSpec, theta: &ParameterVector, features: &SparseVector) -> Result<usize> {
    let probs = forward(spec, theta, features)?;
    Ok(argmax(&probs))
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Gradient of one record's negative log-likelihood, stored as
/// `(parameter index, value)` pairs with unique indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleGradient {
    entries: Vec<(usize, f64)>,
}

impl ExampleGradient {
    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    /// `out[i] += scale * g[i]`.
    pub fn accumulate(&self, scale: f64, out: &mut [f64]) {
        for &(i, v) in &self.entries {
            out[i] += scale * v;
        }
    }

    pub fn to_dense(&self, p: usize) -> Vec<f64> {
        let mut out = vec![0.0; p];
        self.accumulate(1.0, &mut out);
        out
    }
}

/// Per-record gradient of `-ℓ_θ(record)` (no prior term, no batch scaling).
pub fn example_gradient(
    spec: &ModelSpec,
    theta: &ParameterVector,
    record: &Record,
) -> Result<ExampleGradient> {
    example_gradient_and_ll(spec, theta, record).map(|(g, _)| g)
}

/// [`example_gradient`] together with the record's log-likelihood.
pub(crate) fn example_gradient_and_ll(
    spec: &ModelSpec,
    theta: &ParameterVector,
    record: &Record,
) -> Result<(ExampleGradient, f64)> {
    spec.check(theta, &record.features)?;
    if record.label >= spec.num_classes {
        return Err(Error::invalid(format!("record {} label out of range", record.id)));
    }
    let acts = activations(spec, theta, &record.features);
    let ll = acts.probs[record.label].max(PROB_FLOOR).ln();
    let mut dz = acts.probs;
    dz[record.label] -= 1.0;

    let x = &record.features;
    let layout = theta.layout().tensors();
    let mut entries = Vec::new();
    match spec.family {
        ModelFamily::SoftmaxLinear => {
            let (w_off, b_off) = (layout[0].offset, layout[1].offset);
            let d = spec.input_dim;
            entries.reserve(dz.len() * (x.nnz() + 1));
            for (c, g) in dz.iter().enumerate() {
                for (j, xj) in x.iter() {
                    entries.push((w_off + c * d + j, g * xj));
                }
            }
            for (c, g) in dz.iter().enumerate() {
                entries.push((b_off + c, *g));
            }
        }
        ModelFamily::Mlp1Hidden => {
            let (d, h) = (spec.input_dim, spec.hidden_dim);
            let w2 = &theta.values()[layout[2].range()];
            let (w1_off, b1_off, w2_off, b2_off) = (
                layout[0].offset,
                layout[1].offset,
                layout[2].offset,
                layout[3].offset,
            );
            let da: Vec<f64> = (0..h)
                .map(|u| {
                    let du: f64 = dz.iter().enumerate().map(|(c, g)| w2[c * h + u] * g).sum();
                    du * (1.0 - acts.hidden[u] * acts.hidden[u])
                })
                .collect();
            for (u, g) in da.iter().enumerate() {
                for (j, xj) in x.iter() {
                    entries.push((w1_off + u * d + j, g * xj));
                }
            }
            for (u, g) in da.iter().enumerate() {
                entries.push((b1_off + u, *g));
            }
            for (c, g) in dz.iter().enumerate() {
                for (u, a) in acts.hidden.iter().enumerate() {
                    entries.push((w2_off + c * h + u, g * a));
                }
            }
            for (c, g) in dz.iter().enumerate() {
                entries.push((b2_off + c, *g));
            }
        }
    }
    Ok((ExampleGradient { entries }, ll))
}

fn check_weight(record: &Record, alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::WeightOutOfRange {
            record_id: record.id,
            value: alpha,
        })
    }
}

/// Gradient of `-(1/|B|) Σ α_i ℓ_θ(D_i) + (λ/2)‖θ‖²` with λ the model's weight decay.
///
/// Records are accumulated in batch order, so the result is bit-reproducible.
pub fn weighted_nll_gradient(
    spec: &ModelSpec,
    theta: &ParameterVector,
    batch: &[(&Record, f64)],
) -> Result<ParameterVector> {
    let (mut grad, _) = data_gradient(spec, theta, batch)?;
    if spec.weight_decay != 0.0 {
        for (g, t) in grad.iter_mut().zip(theta.values()) {
            *g += spec.weight_decay * t;
        }
    }
    ParameterVector::new(theta.layout().clone(), grad)
}

/// Data term of [`weighted_nll_gradient`] only (no prior), as a raw vector,
/// together with the data term of the objective, `-(1/|B|) Σ α_i ℓ_i`.
pub(crate) fn data_gradient(
    spec: &ModelSpec,
    theta: &ParameterVector,
    batch: &[(&Record, f64)],
) -> Result<(Vec<f64>, f64)> {
    if batch.is_empty() {
        return Err(Error::Empty("gradient batch".into()));
    }
    let mut grad = vec![0.0; theta.len()];
    let mut ll_sum = 0.0;
    for (record, alpha) in batch {
        check_weight(record, *alpha)?;
        let (g, ll) = example_gradient_and_ll(spec, theta, record)?;
        g.accumulate(*alpha, &mut grad);
        ll_sum += alpha * ll;
    }
    let inv = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((grad, -ll_sum * inv))
}

/// Value of the objective whose gradient is [`weighted_nll_gradient`].
pub fn weighted_nll(spec: &ModelSpec, theta: &ParameterVector, batch: &[(&Record, f64)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("loss batch".into()));
    }
    let mut total = 0.0;
    for (record, alpha) in batch {
        check_weight(record, *alpha)?;
        total += alpha * log_likelihood(spec, theta, record)?;
    }
    let penalty = 0.5 * spec.weight_decay * theta.values().iter().map(|v| v * v).sum::<f64>();
    Ok(-total / batch.len() as f64 + penalty)
}
