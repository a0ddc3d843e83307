//! Training loops: adaptive fine-tuning, constant-rate SGD for SWAG
//! exploration, and DP-SGD with per-example clipping and Gaussian noise.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{data_gradient, example_gradient, ModelSpec, Record};
use crate::params::ParameterVector;
use crate::ppm::RiskWeights;

/// Stream index of the DP noise generator; batch sampling uses stream 0.
pub const NOISE_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// Adaptive moments with decoupled weight decay.
    Adaptive,
    SgdConstant,
    DpSgd,
}

/// Update rule applied to the privatised DP-SGD gradient.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DpUpdate {
    #[default]
    Sgd,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdaptiveParams {
    fn default() -> Self {
        AdaptiveParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// DP-SGD only. `f64::INFINITY` disables clipping.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// DP-SGD only.
    #[serde(default)]
    pub noise_multiplier: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub adaptive: AdaptiveParams,
    /// DP-SGD only.
    #[serde(default)]
    pub dp_update: DpUpdate,
}

impl TrainConfig {
    pub fn new(optimizer: Optimizer, learning_rate: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            optimizer,
            learning_rate,
            batch_size,
            epochs,
            clip_norm: None,
            noise_multiplier: None,
            seed,
            weight_decay: 0.0,
            adaptive: AdaptiveParams::default(),
            dp_update: DpUpdate::Sgd,
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn with_dp_update(mut self, update: DpUpdate) -> Self {
        self.dp_update = update;
        self
    }

    pub fn with_dp(mut self, clip_norm: f64, noise_multiplier: f64) -> Self {
        self.clip_norm = Some(clip_norm);
        self.noise_multiplier = Some(noise_multiplier);
        self
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.batch_size > n {
            return Err(Error::invalid(format!(
                "batch_size {} exceeds dataset size {n}",
                self.batch_size
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay must be nonnegative and finite"));
        }
        if self.optimizer == Optimizer::DpSgd {
            self.dp_step()?;
        }
        Ok(())
    }

    fn dp_step(&self) -> Result<DpStep> {
        let (Some(clip_norm), Some(noise_multiplier)) = (self.clip_norm, self.noise_multiplier) else {
            return Err(Error::invalid("dp-sgd requires clip_norm and noise_multiplier"));
        };
        let step = DpStep {
            clip_norm,
            noise_multiplier,
            learning_rate: self.learning_rate,
        };
        step.validate()?;
        Ok(step)
    }
}

/// Number of DP-SGD steps taken for `epochs` passes at `batch_size` over `n` records.
pub fn dp_steps(n: usize, batch_size: usize, epochs: usize) -> u64 {
    (epochs * n.div_ceil(batch_size)) as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSnapshot {
    pub epoch: usize,
    pub params: ParameterVector,
    pub mean_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub params: ParameterVector,
    pub snapshots: Vec<EpochSnapshot>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MinibatchMode {
    /// Shuffle and cut into consecutive batches; each record appears once.
    ShufflePartition,
    /// Include every record independently with probability `q`, `batches` times.
    Poisson { q: f64, batches: usize },
}

/// Batches of record indices in `0..n`.
pub fn sample_minibatches(n: usize, batch_size: usize, mode: MinibatchMode, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        MinibatchMode::ShufflePartition => {
            if batch_size == 0 {
                return Err(Error::invalid("batch_size must be positive"));
            }
            Ok(shuffle_partition(n, batch_size, &mut rng))
        }
        MinibatchMode::Poisson { q, batches } => {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::invalid(format!("Poisson rate {q} outside (0, 1]")));
            }
            Ok((0..batches).map(|_| poisson_batch(n, q, &mut rng)).collect())
        }
    }
}

fn shuffle_partition(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn poisson_batch(n: usize, q: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).filter(|_| q >= 1.0 || rng.random::<f64>() < q).collect()
}

/// Hyperparameters of one DP-SGD update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpStep {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub learning_rate: f64,
}

impl DpStep {
    fn validate(&self) -> Result<()> {
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(Error::invalid("noise_multiplier must be nonnegative and finite"));
        }
        if self.noise_multiplier > 0.0 && self.clip_norm.is_infinite() {
            return Err(Error::invalid("noise requires a finite clip_norm"));
        }
        Ok(())
    }
}

/// Factor `min(1, C/‖g‖)` that clips a gradient of norm `norm` to at most `clip_norm`.
pub fn clip_factor(norm: f64, clip_norm: f64) -> f64 {
    if norm <= clip_norm {
        1.0
    } else {
        clip_norm / norm
    }
}

/// `g · min(1, C/‖g‖)`.
pub fn clip_gradient(grad: &[f64], clip_norm: f64) -> Vec<f64> {
    let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    let s = clip_factor(norm, clip_norm);
    grad.iter().map(|v| v * s).collect()
}

/// Noised, clipped gradient `(Σ clip(g_i) + N(0, σ²C²I)) / denominator`.
///
/// Per-example gradients are computed in parallel and summed in batch order.
pub fn dp_sgd_gradient(
    spec: &ModelSpec,
    theta: &ParameterVector,
    batch: &[&Record],
    step: &DpStep,
    denominator: f64,
    noise: &mut impl Rng,
) -> Result<Vec<f64>> {
    step.validate()?;
    let grads = batch
        .par_iter()
        .map(|r| example_gradient(spec, theta, r))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = vec![0.0; theta.len()];
    for g in &grads {
        g.accumulate(clip_factor(g.norm(), step.clip_norm), &mut sum);
    }
    if step.noise_multiplier > 0.0 {
        let sd = step.noise_multiplier * step.clip_norm;
        for v in sum.iter_mut() {
            let z: f64 = noise.sample(StandardNormal);
            *v += sd * z;
        }
    }
    let inv = 1.0 / denominator;
    sum.iter_mut().for_each(|v| *v *= inv);
    Ok(sum)
}

/// One standalone DP-SGD update on `minibatch`, normalised by its size, with
/// noise drawn from the stream seeded by `noise_seed`.
pub fn dp_sgd_step(
    spec: &ModelSpec,
    theta: &ParameterVector,
    minibatch: &[&Record],
    step: &DpStep,
    noise_seed: u64,
) -> Result<ParameterVector> {
    if minibatch.is_empty() {
        return Err(Error::Empty("DP-SGD minibatch".into()));
    }
    let mut rng = noise_rng(noise_seed);
    let grad = dp_sgd_gradient(spec, theta, minibatch, step, minibatch.len() as f64, &mut rng)?;
    let mut values = theta.values().to_vec();
    sgd_apply(&mut values, &grad, step.learning_rate, 0.0);
    ParameterVector::new(theta.layout().clone(), values)
}

fn noise_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(NOISE_STREAM);
    rng
}

/// Plain gradient step with coupled weight decay: `θ ← θ − lr (g + λθ)`.
fn sgd_apply(theta: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
    if weight_decay != 0.0 {
        for (t, g) in theta.iter_mut().zip(grad) {
            *t -= lr * (g + weight_decay * *t);
        }
    } else {
        for (t, g) in theta.iter_mut().zip(grad) {
            *t -= lr * g;
        }
    }
}

struct AdaptiveState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdaptiveState {
    fn new(p: usize) -> Self {
        AdaptiveState {
            m: vec![0.0; p],
            v: vec![0.0; p],
            t: 0,
        }
    }

    fn apply(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64, hp: &AdaptiveParams) {
        self.t += 1;
        let bc1 = 1.0 - hp.beta1.powi(self.t);
        let bc2 = 1.0 - hp.beta2.powi(self.t);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = hp.beta1 * self.m[i] + (1.0 - hp.beta1) * g;
            self.v[i] = hp.beta2 * self.v[i] + (1.0 - hp.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= lr * (m_hat / (v_hat.sqrt() + hp.eps) + weight_decay * theta[i]);
        }
    }
}

fn lookup_weights(records: &[Record], weights: Option<&RiskWeights>) -> Result<Vec<f64>> {
    let Some(weights) = weights else {
        return Ok(vec![1.0; records.len()]);
    };
    let by_id: HashMap<u64, f64> = weights
        .record_ids
        .iter()
        .copied()
        .zip(weights.alphas.iter().copied())
        .collect();
    records
        .iter()
        .map(|r| {
            by_id
                .get(&r.id)
                .copied()
                .ok_or_else(|| Error::invalid(format!("no weight for record {}", r.id)))
        })
        .collect()
}

/// Trains from `theta0` and returns the final parameters with one snapshot per epoch.
///
/// Batch order comes from a generator seeded with `config.seed`; DP noise
/// comes from a separate stream of the same seed.
pub fn train(
    spec: &ModelSpec,
    theta0: &ParameterVector,
    records: &[Record],
    weights: Option<&RiskWeights>,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    spec.validate()?;
    if records.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    config.validate(records.len())?;
    theta0.check_same_layout(&ParameterVector::zeros(spec.layout()))?;
    let alphas = lookup_weights(records, weights)?;
    if config.optimizer == Optimizer::DpSgd && weights.is_some() {
        return Err(Error::invalid("dp-sgd does not take record weights"));
    }

    let n = records.len();
    let mut theta = theta0.values().to_vec();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut noise = noise_rng(config.seed);
    let mut adaptive = AdaptiveState::new(theta.len());
    let mut snapshots = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let (mut loss_sum, mut loss_count) = (0.0, 0usize);
        match config.optimizer {
            Optimizer::Adaptive | Optimizer::SgdConstant => {
                for (b, batch) in shuffle_partition(n, config.batch_size, &mut batch_rng).iter().enumerate() {
                    let current = ParameterVector::from_parts_unchecked(theta0.layout().clone(), theta);
                    let pairs: Vec<(&Record, f64)> = batch.iter().map(|&i| (&records[i], alphas[i])).collect();
                    let (grad, loss) = data_gradient(spec, &current, &pairs)?;
                    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                        return Err(Error::NonFiniteLoss { epoch, batch: b, loss });
                    }
                    loss_sum += loss * batch.len() as f64;
                    loss_count += batch.len();
                    theta = current.into_values();
                    if config.optimizer == Optimizer::Adaptive {
                        adaptive.apply(&mut theta, &grad, config.learning_rate, config.weight_decay, &config.adaptive);
                    } else {
                        sgd_apply(&mut theta, &grad, config.learning_rate, config.weight_decay);
                    }
                }
            }
            Optimizer::DpSgd => {
                let step = config.dp_step()?;
                let q = config.batch_size as f64 / n as f64;
                for b in 0..n.div_ceil(config.batch_size) {
                    let batch = poisson_batch(n, q, &mut batch_rng);
                    if batch.is_empty() {
                        continue;
                    }
                    let current = ParameterVector::from_parts_unchecked(theta0.layout().clone(), theta);
                    let members: Vec<&Record> = batch.iter().map(|&i| &records[i]).collect();
                    let grad = dp_sgd_gradient(spec, &current, &members, &step, config.batch_size as f64, &mut noise)?;
                    let pairs: Vec<(&Record, f64)> = members.iter().map(|r| (*r, 1.0)).collect();
                    let (_, loss) = data_gradient(spec, &current, &pairs)?;
                    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                        return Err(Error::NonFiniteLoss { epoch, batch: b, loss });
                    }
                    loss_sum += loss * batch.len() as f64;
                    loss_count += batch.len();
                    theta = current.into_values();
                    match config.dp_update {
                        DpUpdate::Sgd => sgd_apply(&mut theta, &grad, config.learning_rate, config.weight_decay),
                        DpUpdate::Adaptive => {
                            adaptive.apply(&mut theta, &grad, config.learning_rate, config.weight_decay, &config.adaptive)
                        }
                    }
                }
            }
        }
        let params = ParameterVector::new(theta0.layout().clone(), theta.clone()).map_err(|_| {
            Error::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
                loss: f64::NAN,
            }
        })?;
        let mean_train_loss = if loss_count > 0 { loss_sum / loss_count as f64 } else { f64::NAN };
        log::debug!("epoch {epoch}: mean train loss {mean_train_loss:.6}");
        snapshots.push(EpochSnapshot {
            epoch,
            params,
            mean_train_loss,
        });
    }

    Ok(TrainOutput {
        params: ParameterVector::new(theta0.layout().clone(), theta)?,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{example_gradient, SparseVector};

    fn separable() -> (ModelSpec, Vec<Record>) {
        let spec = ModelSpec::softmax_linear(1, 2);
        let recs = [(-2.0, 0), (-1.0, 0), (1.0, 1), (2.0, 1)]
            .iter()
            .enumerate()
            .map(|(i, (x, y))| Record {
                id: i as u64,
                features: SparseVector::from_dense(&[*x]).unwrap(),
                label: *y,
            })
            .collect();
        (spec, recs)
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (spec, recs) = separable();
        let theta0 = spec.init(1).unwrap();
        let cfg = TrainConfig::new(Optimizer::SgdConstant, 0.1, 2, 0, 3);
        let out = train(&spec, &theta0, &recs, None, &cfg).unwrap();
        assert_eq!(out.params, theta0);
        assert!(out.snapshots.is_empty());
    }

    #[test]
    fn full_batch_sgd_loss_is_non_increasing() {
        let (spec, recs) = separable();
        let theta0 = ParameterVector::zeros(spec.layout());
        let cfg = TrainConfig::new(Optimizer::SgdConstant, 0.1, 4, 20, 0);
        let out = train(&spec, &theta0, &recs, None, &cfg).unwrap();
        assert_eq!(out.snapshots.len(), 20);
        for w in out.snapshots.windows(2) {
            assert!(w[1].mean_train_loss <= w[0].mean_train_loss);
        }
    }

    #[test]
    fn snapshot_is_live_parameters_at_epoch_end() {
        let (spec, recs) = separable();
        let theta0 = spec.init(2).unwrap();
        for opt in [Optimizer::Adaptive, Optimizer::SgdConstant] {
            let one = train(&spec, &theta0, &recs, None, &TrainConfig::new(opt, 0.05, 3, 1, 9)).unwrap();
            let two = train(&spec, &theta0, &recs, None, &TrainConfig::new(opt, 0.05, 3, 2, 9)).unwrap();
            assert_eq!(one.snapshots[0].params, one.params);
            assert_eq!(two.snapshots[0].params, one.params);
            assert_eq!(two.snapshots[1].params, two.params);
        }
    }

    #[test]
    fn missing_weight_is_rejected() {
        let (spec, recs) = separable();
        let theta0 = spec.init(2).unwrap();
        let weights = RiskWeights::uniform(vec![0, 1, 2]);
        let cfg = TrainConfig::new(Optimizer::SgdConstant, 0.1, 2, 1, 0);
        assert!(train(&spec, &theta0, &recs, Some(&weights), &cfg).is_err());
    }

    #[test]
    fn partition_covers_every_record_once() {
        let batches = sample_minibatches(10, 3, MinibatchMode::ShufflePartition, 4).unwrap();
        let sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn poisson_full_rate_takes_everything() {
        let batches = sample_minibatches(7, 1, MinibatchMode::Poisson { q: 1.0, batches: 3 }, 0).unwrap();
        assert!(batches.iter().all(|b| *b == (0..7).collect::<Vec<_>>()));
    }

    #[test]
    fn poisson_inclusion_count_is_binomial() {
        let n = 10_000;
        let b = sample_minibatches(n, 1, MinibatchMode::Poisson { q: 0.5, batches: 1 }, 11).unwrap();
        let sd = (n as f64 * 0.25).sqrt();
        assert!((b[0].len() as f64 - 5_000.0).abs() < 3.0 * sd);
    }

    #[test]
    fn clipping_hits_the_bound_exactly() {
        let g = vec![1.2, -1.6]; // norm 2
        let c = clip_gradient(&g, 1.0);
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(clip_gradient(&g, 5.0), g);
    }

    #[test]
    fn noiseless_unclipped_step_equals_sgd() {
        let spec = ModelSpec::mlp(3, 4, 3);
        let theta = spec.init(5).unwrap();
        let recs: Vec<Record> = (0..6)
            .map(|i| Record {
                id: i,
                features: SparseVector::from_dense(&[0.1 * i as f64, -0.4, 1.0]).unwrap(),
                label: (i % 3) as usize,
            })
            .collect();
        let batch: Vec<&Record> = recs.iter().collect();
        let step = DpStep {
            clip_norm: f64::INFINITY,
            noise_multiplier: 0.0,
            learning_rate: 0.3,
        };
        let dp = dp_sgd_step(&spec, &theta, &batch, &step, 0).unwrap();
        let pairs: Vec<(&Record, f64)> = recs.iter().map(|r| (r, 1.0)).collect();
        let (g, _) = data_gradient(&spec, &theta, &pairs).unwrap();
        let mut sgd = theta.values().to_vec();
        sgd_apply(&mut sgd, &g, 0.3, 0.0);
        assert_eq!(dp.values(), sgd.as_slice());
    }

    #[test]
    fn noised_step_is_reproducible() {
        let (spec, recs) = separable();
        let theta = spec.init(0).unwrap();
        let batch: Vec<&Record> = recs.iter().collect();
        let step = DpStep {
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            learning_rate: 0.1,
        };
        let a = dp_sgd_step(&spec, &theta, &batch, &step, 42).unwrap();
        let b = dp_sgd_step(&spec, &theta, &batch, &step, 42).unwrap();
        let c = dp_sgd_step(&spec, &theta, &batch, &step, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(dp_sgd_step(&spec, &theta, &[], &step, 42).is_err());
    }

    #[test]
    fn single_clipped_example_moves_by_lr_times_c() {
        let (spec, recs) = separable();
        let theta = spec.init(0).unwrap();
        let g = example_gradient(&spec, &theta, &recs[0]).unwrap();
        let c = g.norm() / 2.0;
        let step = DpStep {
            clip_norm: c,
            noise_multiplier: 0.0,
            learning_rate: 1.0,
        };
        let next = dp_sgd_step(&spec, &theta, &[&recs[0]], &step, 0).unwrap();
        let moved = next.add(&theta.scale(-1.0).unwrap()).unwrap().l2_norm();
        assert!((moved - c).abs() < 1e-12);
    }

    #[test]
    fn adaptive_dp_update_uses_same_noise_and_batches() {
        let (spec, recs) = separable();
        let theta0 = spec.init(0).unwrap();
        let sgd = TrainConfig::new(Optimizer::DpSgd, 0.1, 2, 2, 5).with_dp(1.0, 1.1);
        let adaptive = sgd.clone().with_dp_update(DpUpdate::Adaptive);
        let a = train(&spec, &theta0, &recs, None, &adaptive).unwrap();
        let b = train(&spec, &theta0, &recs, None, &adaptive).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, train(&spec, &theta0, &recs, None, &sgd).unwrap().params);
    }

    #[test]
    fn dp_training_is_deterministic() {
        let (spec, recs) = separable();
        let theta0 = spec.init(0).unwrap();
        let cfg = TrainConfig::new(Optimizer::DpSgd, 0.1, 2, 3, 5).with_dp(1.0, 1.1);
        let a = train(&spec, &theta0, &recs, None, &cfg).unwrap();
        let b = train(&spec, &theta0, &recs, None, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert!(train(&spec, &theta0, &recs, None, &TrainConfig::new(Optimizer::DpSgd, 0.1, 2, 1, 0)).is_err());
    }
}
