//! Independent reference computations shared by the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swagppm::model::{weighted_nll, weighted_nll_gradient};
use swagppm::{ModelFamily, ModelSpec, ParameterVector, Record, SparseVector};

/// A small random model, parameter vector and weighted batch.
pub struct Instance {
    pub spec: ModelSpec,
    pub theta: ParameterVector,
    pub records: Vec<Record>,
    pub weights: Vec<f64>,
}

impl Instance {
    pub fn batch(&self) -> Vec<(&Record, f64)> {
        self.records.iter().zip(&self.weights).map(|(r, w)| (r, *w)).collect()
    }
}

/// Random instance with at most 50 parameters.
pub fn random_instance(seed: u64, family: ModelFamily) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = loop {
        let d = rng.random_range(1..=6);
        let k = rng.random_range(2..=4);
        let spec = match family {
            ModelFamily::SoftmaxLinear => ModelSpec::softmax_linear(d, k),
            ModelFamily::Mlp1Hidden => ModelSpec::mlp(d, rng.random_range(1..=4), k),
        }
        .with_weight_decay(rng.random_range(0.0..0.1));
        if spec.num_params() <= 50 {
            break spec;
        }
    };
    let values = (0..spec.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let theta = ParameterVector::new(spec.layout(), values).unwrap();
    let n = rng.random_range(1..=5);
    let records = (0..n)
        .map(|i| {
            let dense: Vec<f64> = (0..spec.input_dim)
                .map(|_| if rng.random_bool(0.7) { rng.random_range(-1.0..1.0) } else { 0.0 })
                .collect();
            Record {
                id: i,
                features: SparseVector::from_dense(&dense).unwrap(),
                label: rng.random_range(0..spec.num_classes),
            }
        })
        .collect();
    let weights = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
    Instance {
        spec,
        theta,
        records,
        weights,
    }
}

/// Central finite-difference gradient of the weighted objective.
pub fn finite_difference_gradient(inst: &Instance, h: f64) -> Vec<f64> {
    let batch = inst.batch();
    (0..inst.theta.len())
        .map(|i| {
            let mut plus = inst.theta.values().to_vec();
            let mut minus = plus.clone();
            plus[i] += h;
            minus[i] -= h;
            let f = |v: Vec<f64>| weighted_nll(&inst.spec, &ParameterVector::new(inst.spec.layout(), v).unwrap(), &batch).unwrap();
            (f(plus) - f(minus)) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖₂ / (‖a‖₂ + ‖b‖₂)`, or 0 when both vanish.
pub fn normwise_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Worst norm-wise relative error between analytic and finite-difference
/// gradients over `count` random instances of `family`.
pub fn gradient_oracle_max_error(family: ModelFamily, count: u64, seed0: u64) -> f64 {
    (0..count)
        .map(|s| {
            let inst = random_instance(seed0 + s, family);
            let analytic = weighted_nll_gradient(&inst.spec, &inst.theta, &inst.batch()).unwrap();
            let numeric = finite_difference_gradient(&inst, 1e-5);
            normwise_relative_error(analytic.values(), &numeric)
        })
        .fold(0.0, f64::max)
}

/// Two-pass mean and population variance per coordinate.
pub fn batch_moments(snapshots: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let t = snapshots.len() as f64;
    let p = snapshots[0].len();
    let mean: Vec<f64> = (0..p).map(|j| snapshots.iter().map(|s| s[j]).sum::<f64>() / t).collect();
    let sq_mean: Vec<f64> = (0..p).map(|j| snapshots.iter().map(|s| s[j] * s[j]).sum::<f64>() / t).collect();
    let var: Vec<f64> = (0..p)
        .map(|j| snapshots.iter().map(|s| (s[j] - mean[j]).powi(2)).sum::<f64>() / t)
        .collect();
    (mean, sq_mean, var)
}

pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let scale = x.abs().max(y.abs());
            if scale == 0.0 {
                0.0
            } else {
                (x - y).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

/// Direct (non-log-space) evaluation of the sampled-Gaussian RDP sum, for
/// parameter ranges where it cannot overflow.
pub fn sgm_rdp_direct(q: f64, sigma: f64, alpha: u32) -> f64 {
    let a = alpha as i32;
    let mut sum = 0.0;
    let mut binom = 1.0;
    for k in 0..=a {
        if k > 0 {
            binom = binom * (a - k + 1) as f64 / k as f64;
        }
        let kf = k as f64;
        sum += binom * (1.0 - q).powi(a - k) * q.powi(k) * (kf * (kf - 1.0) / (2.0 * sigma * sigma)).exp();
    }
    sum.ln() / (alpha as f64 - 1.0)
}
