//! End-to-end runs: data preparation, the non-private baseline, SWAG-PPM
//! (plain and reweighted), DP-SGD, and the four-model benchmark.
//!
//! Every run directory gets a `manifest.json` holding the resolved config,
//! the derived seeds and the dataset hash. SWAG-PPM keeps moments,
//! likelihood matrices and weights under `internal/`; only the single
//! released draw and its privacy report go under `release/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::accountant::{calibrate_noise, RdpLedger};
use crate::checkpoint::Checkpoint;
use crate::data::{self, LabeledDataset, Split, SyntheticSpec, DEFAULT_HASH_DIM};
use crate::error::{Error, Result};
use crate::eval::{self, ConfusionTally, PerClassRow, QuartileReport, SummaryRow};
use crate::model::{ModelFamily, ModelSpec, Record};
use crate::params::ParameterVector;
use crate::ppm::{self, RiskWeights, SensitivityReport};
use crate::swag::{SwagMoments, DEFAULT_MAX_RANK};
use crate::trainer::{dp_steps, train, DpUpdate, Optimizer, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

pub const NON_PRIVATE: &str = "Non-Private";
pub const SWAG_PPM: &str = "SWAG-PPM";
pub const SWAG_PPM_RW: &str = "SWAG-PPM (Reweighted)";
pub const DP_SGD: &str = "DP-SGD";

/// Delta descriptor reported for SWAG-PPM rows.
pub const SWAG_PPM_DELTA: &str = "O(n^-1/2)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Per-class cap for stratified subsampling; `None` keeps every record.
    pub cap: Option<usize>,
    pub sampling_fraction: f64,
    pub train_fraction: f64,
    pub hash_dim: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic(SyntheticSpec::default()),
            cap: None,
            sampling_fraction: 1.0,
            train_fraction: 0.5,
            hash_dim: DEFAULT_HASH_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub family: ModelFamily,
    /// Ignored by the linear family.
    pub hidden_dim: usize,
    pub weight_decay: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            family: ModelFamily::SoftmaxLinear,
            hidden_dim: 64,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwagPpmConfig {
    pub finetune: PhaseConfig,
    pub swag: PhaseConfig,
    pub max_rank: usize,
    pub draws: usize,
    pub c: f64,
    pub g: f64,
    pub k: f64,
    /// Write the |ℓ| matrices under `internal/`.
    pub persist_matrices: bool,
}

impl Default for SwagPpmConfig {
    fn default() -> Self {
        SwagPpmConfig {
            finetune: PhaseConfig {
                epochs: 10,
                learning_rate: 0.01,
                batch_size: 16,
            },
            swag: PhaseConfig {
                epochs: 20,
                learning_rate: 0.01,
                batch_size: 16,
            },
            max_rank: DEFAULT_MAX_RANK,
            draws: 500,
            c: 1.0,
            g: 0.0,
            k: 0.95,
            persist_matrices: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NonPrivateSchedule {
    /// Adaptive optimizer for all epochs.
    Adaptive,
    /// The SWAG-PPM schedule without weights: adaptive fine-tuning, then
    /// constant-rate SGD; the final iterate is released.
    FinetuneThenSgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonPrivateConfig {
    pub schedule: NonPrivateSchedule,
    /// Used by the adaptive schedule; the other schedule reuses the SWAG-PPM phases.
    pub phase: PhaseConfig,
}

impl Default for NonPrivateConfig {
    fn default() -> Self {
        NonPrivateConfig {
            schedule: NonPrivateSchedule::Adaptive,
            phase: PhaseConfig {
                epochs: 30,
                learning_rate: 0.01,
                batch_size: 16,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpSgdConfig {
    pub target_epsilon: f64,
    pub delta: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub update: DpUpdate,
}

impl Default for DpSgdConfig {
    fn default() -> Self {
        DpSgdConfig {
            target_epsilon: 4.0,
            delta: 1e-4,
            clip_norm: 1.0,
            batch_size: 512,
            learning_rate: 0.001,
            epochs: 30,
            update: DpUpdate::Adaptive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub delta_sweep: Vec<f64>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            delta_sweep: vec![1e-3, 1e-2, 0.1, 0.99],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Master seed; every phase seed is derived from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub swag_ppm: SwagPpmConfig,
    pub nonprivate: NonPrivateConfig,
    pub dp_sgd: DpSgdConfig,
    pub benchmark: BenchmarkConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            swag_ppm: SwagPpmConfig::default(),
            nonprivate: NonPrivateConfig::default(),
            dp_sgd: DpSgdConfig::default(),
            benchmark: BenchmarkConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies a dotted `key=value` override. The value is parsed as JSON
    /// when possible and taken as a string otherwise. The key must exist.
    pub fn with_override(&self, assignment: &str) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let mut doc = serde_json::to_value(self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let cfg: RunConfig = serde_json::from_value(doc).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !self.data.hash_dim.is_power_of_two() {
            return Err(Error::Config("data.hash_dim must be a power of two".into()));
        }
        if let DataSource::Csv { path } = &self.data.source {
            if !path.exists() {
                return Err(Error::Config(format!("data file {} does not exist", path.display())));
            }
        }
        if let DataSource::Synthetic(spec) = &self.data.source {
            spec.validate().map_err(config_err)?;
        }
        if self.model.family == ModelFamily::Mlp1Hidden && self.model.hidden_dim == 0 {
            return Err(Error::Config("model.hidden_dim must be positive for the hidden-layer family".into()));
        }
        if !(self.model.weight_decay >= 0.0 && self.model.weight_decay.is_finite()) {
            return Err(Error::Config("model.weight_decay must be nonnegative and finite".into()));
        }
        let s = &self.swag_ppm;
        if s.draws == 0 || s.swag.epochs == 0 || s.max_rank == 0 {
            return Err(Error::Config("swag_ppm needs draws, swag epochs and max_rank >= 1".into()));
        }
        if !(s.k > 0.0 && s.k < 1.0) {
            return Err(Error::Config("swag_ppm.k must lie in (0, 1)".into()));
        }
        let d = &self.dp_sgd;
        if !(d.delta > 0.0 && d.delta < 1.0) || self.benchmark.delta_sweep.iter().any(|x| !(*x > 0.0 && *x < 1.0)) {
            return Err(Error::Config("every delta must lie in (0, 1)".into()));
        }
        if !(d.target_epsilon > 0.0 && d.clip_norm > 0.0) {
            return Err(Error::Config("dp_sgd target_epsilon and clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn seed(&self, phase: &str) -> u64 {
        derive_seed(self.seed, phase)
    }

    fn train_config(&self, optimizer: Optimizer, phase: &PhaseConfig, seed_name: &str) -> TrainConfig {
        TrainConfig::new(
            optimizer,
            phase.learning_rate,
            phase.batch_size,
            phase.epochs,
            self.seed(seed_name),
        )
        .with_weight_decay(self.model.weight_decay)
    }
}

/// Seed for a named phase, mixed from the master seed with SplitMix64.
pub fn derive_seed(master: u64, phase: &str) -> u64 {
    let mut z = master ^ data::fnv1a64(phase.as_bytes());
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Names of every derived seed used by the pipeline.
pub const SEED_NAMES: &[&str] = &[
    "data", "sample", "split", "init", "finetune", "swag", "draws-1", "draws-2", "draws-3", "release", "nonprivate",
    "dp-sgd",
];

/// Split, featurised data plus the model shape it implies.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dataset: LabeledDataset,
    pub train: Vec<Record>,
    pub test: Vec<Record>,
    /// Total records per class (train and test).
    pub class_sizes: Vec<usize>,
    pub spec: ModelSpec,
    pub manifest: data::DatasetManifest,
}

impl PreparedData {
    pub fn num_classes(&self) -> usize {
        self.class_sizes.len()
    }

    pub fn train_ids(&self) -> Vec<u64> {
        self.train.iter().map(|r| r.id).collect()
    }
}

pub fn load_dataset(config: &RunConfig) -> Result<LabeledDataset> {
    match &config.data.source {
        DataSource::Synthetic(spec) => data::generate(&SyntheticSpec {
            seed: config.seed("data"),
            ..spec.clone()
        }),
        DataSource::Csv { path } => data::read_csv(path),
    }
}

pub fn prepare_data(config: &RunConfig) -> Result<PreparedData> {
    let mut dataset = load_dataset(config)?;
    if let Some(cap) = config.data.cap {
        dataset = data::stratified_cap_sample(&dataset, cap, config.data.sampling_fraction, config.seed("sample"))?;
    }
    let dataset = data::stratified_split(&dataset, config.data.train_fraction, config.seed("split"))?;
    let train = dataset.records(Split::Train, config.data.hash_dim)?;
    let test = dataset.records(Split::Test, config.data.hash_dim)?;
    let spec = ModelSpec {
        family: config.model.family,
        input_dim: config.data.hash_dim,
        hidden_dim: match config.model.family {
            ModelFamily::SoftmaxLinear => 0,
            ModelFamily::Mlp1Hidden => config.model.hidden_dim,
        },
        num_classes: dataset.num_classes(),
        weight_decay: config.model.weight_decay,
    };
    spec.validate().map_err(config_err)?;
    let manifest = dataset.manifest(Some(config.seed("split")))?;
    Ok(PreparedData {
        class_sizes: dataset.class_counts(),
        dataset,
        train,
        test,
        spec,
        manifest,
    })
}

/// Replay information written to every run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    pub dataset: data::DatasetManifest,
}

pub fn write_manifest(dir: &Path, config: &RunConfig, data: &PreparedData) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        seeds: SEED_NAMES.iter().map(|n| (n.to_string(), config.seed(n))).collect(),
        dataset: data.manifest.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Shared parameter initialisation every model starts from.
pub fn base_init(config: &RunConfig, data: &PreparedData) -> Result<ParameterVector> {
    data.spec.init(config.seed("init"))
}

/// Adaptive fine-tuning followed by constant-rate SGD whose per-epoch
/// snapshots feed the SWAG moments. Seeds depend only on the master seed,
/// so rounds differ only through `weights`.
pub fn swag_round(
    config: &RunConfig,
    data: &PreparedData,
    base: &ParameterVector,
    weights: Option<&RiskWeights>,
) -> Result<SwagMoments> {
    let s = &config.swag_ppm;
    let finetune = train(
        &data.spec,
        base,
        &data.train,
        weights,
        &config.train_config(Optimizer::Adaptive, &s.finetune, "finetune"),
    )?;
    let explore = train(
        &data.spec,
        &finetune.params,
        &data.train,
        weights,
        &config.train_config(Optimizer::SgdConstant, &s.swag, "swag"),
    )?;
    let mut moments = SwagMoments::new(base.layout().clone(), s.max_rank)?;
    for snap in &explore.snapshots {
        moments.absorb(&snap.params)?;
    }
    if moments.clamped_entries() > 0 {
        log::debug!("{} negative variance entries clamped to zero", moments.clamped_entries());
    }
    Ok(moments)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantReport {
    pub noise_multiplier: f64,
    pub sampling_rate: f64,
    pub steps: u64,
    pub orders: Vec<u32>,
    pub optimal_order: u32,
    pub delta: f64,
    pub epsilon: f64,
    pub target_epsilon: f64,
}

/// Privacy outcome of one released model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub mechanism: String,
    pub epsilon: f64,
    pub delta: String,
    /// `Δ_α,D` for SWAG-PPM.
    pub sensitivity: Option<f64>,
    pub draws: Option<usize>,
    pub accountant: Option<AccountantReport>,
}

impl PrivacyReport {
    fn from_sensitivity(mechanism: &str, report: &SensitivityReport) -> Self {
        PrivacyReport {
            mechanism: mechanism.to_string(),
            epsilon: report.epsilon,
            delta: SWAG_PPM_DELTA.to_string(),
            sensitivity: Some(report.delta),
            draws: Some(report.draws),
            accountant: None,
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SwagPpmOutcome {
    pub released: ParameterVector,
    pub privacy: PrivacyReport,
    pub report: SensitivityReport,
    pub initial_weights: RiskWeights,
    /// Weights used in the last round; equal to the initial ones without reweighting.
    pub final_weights: RiskWeights,
    /// Moments of every round, in order.
    pub moments: Vec<SwagMoments>,
}

/// Where SWAG-PPM artifacts go under a model directory.
pub fn internal_dir(model_dir: &Path) -> PathBuf {
    model_dir.join("internal")
}

pub fn release_dir(model_dir: &Path) -> PathBuf {
    model_dir.join("release")
}

fn risk_round(
    config: &RunConfig,
    data: &PreparedData,
    moments: &SwagMoments,
    round: usize,
    internal: &Path,
) -> Result<ppm::LikelihoodMatrix> {
    let matrix = ppm::compute_risks_from_posterior(
        &data.spec,
        moments,
        config.swag_ppm.draws,
        config.seed(&format!("draws-{round}")),
        &data.train,
    )?;
    if config.swag_ppm.persist_matrices {
        matrix.save(&internal.join(format!("round{round}_abs_loglik.bin")))?;
    }
    Ok(matrix)
}

/// Runs SWAG-PPM and writes its artifacts under `model_dir`.
///
/// Round 1 trains without weights and scores risks; round 2 retrains from
/// `base` with the mapped weights and measures sensitivity. With
/// `reweighted`, the weights are rescaled by `k` and a third round
/// provides the final sensitivity. One fresh draw from the last round is
/// released.
pub fn run_swag_ppm(
    config: &RunConfig,
    data: &PreparedData,
    base: &ParameterVector,
    reweighted: bool,
    model_dir: &Path,
) -> Result<SwagPpmOutcome> {
    let internal = internal_dir(model_dir);
    let release = release_dir(model_dir);
    fs::create_dir_all(&internal)?;
    let s = &config.swag_ppm;
    let ids = data.train_ids();

    let round1 = swag_round(config, data, base, None).map_err(|e| e.in_phase("swag round 1"))?;
    round1.save(&internal.join("round1_moments.bin"))?;
    let m1 = risk_round(config, data, &round1, 1, &internal).map_err(|e| e.in_phase("risk draws round 1"))?;
    let initial = ppm::map_weights(&ids, &m1.risks(), s.c, s.g).map_err(|e| e.in_phase("weight mapping"))?;
    initial.save_csv(&internal.join("weights_initial.csv"))?;

    let round2 = swag_round(config, data, base, Some(&initial)).map_err(|e| e.in_phase("swag round 2"))?;
    round2.save(&internal.join("round2_moments.bin"))?;
    let m2 = risk_round(config, data, &round2, 2, &internal).map_err(|e| e.in_phase("risk draws round 2"))?;
    let report2 = ppm::sensitivity(&m2, &initial.alphas).map_err(|e| e.in_phase("sensitivity round 2"))?;
    report2.save_json(&internal.join("sensitivity_round2.json"))?;

    let mut moments = vec![round1, round2];
    let (report, final_weights, mechanism) = if reweighted {
        let w = ppm::reweight(&initial, &report2, s.k).map_err(|e| e.in_phase("reweighting"))?;
        w.save_csv(&internal.join("weights_reweighted.csv"))?;
        let round3 = swag_round(config, data, base, Some(&w)).map_err(|e| e.in_phase("swag round 3"))?;
        round3.save(&internal.join("round3_moments.bin"))?;
        let m3 = risk_round(config, data, &round3, 3, &internal).map_err(|e| e.in_phase("risk draws round 3"))?;
        let report3 = ppm::sensitivity(&m3, &w.alphas).map_err(|e| e.in_phase("sensitivity round 3"))?;
        report3.save_json(&internal.join("sensitivity_round3.json"))?;
        moments.push(round3);
        (report3, w, SWAG_PPM_RW)
    } else {
        (report2, initial.clone(), SWAG_PPM)
    };

    let last = moments.last().expect("at least two rounds");
    let released = last
        .draw(config.seed("release"), 0)
        .map_err(|e| e.in_phase("release"))?;
    let privacy = PrivacyReport::from_sensitivity(mechanism, &report);
    fs::create_dir_all(&release)?;
    Checkpoint::new(data.spec.clone(), released.clone())
        .with_seed("master", config.seed)
        .with_seed("release", config.seed("release"))
        .save(&release.join("model.ckpt"))?;
    privacy.save(&release.join("privacy_report.json"))?;

    Ok(SwagPpmOutcome {
        released,
        privacy,
        report,
        initial_weights: initial,
        final_weights,
        moments,
    })
}

/// Trains the non-private comparator.
pub fn run_nonprivate(
    config: &RunConfig,
    data: &PreparedData,
    base: &ParameterVector,
    model_dir: &Path,
) -> Result<ParameterVector> {
    let params = match config.nonprivate.schedule {
        NonPrivateSchedule::Adaptive => {
            let cfg = config.train_config(Optimizer::Adaptive, &config.nonprivate.phase, "nonprivate");
            train(&data.spec, base, &data.train, None, &cfg)?.params
        }
        NonPrivateSchedule::FinetuneThenSgd => {
            let s = &config.swag_ppm;
            let ft = train(
                &data.spec,
                base,
                &data.train,
                None,
                &config.train_config(Optimizer::Adaptive, &s.finetune, "finetune"),
            )?;
            let cfg = config.train_config(Optimizer::SgdConstant, &s.swag, "swag");
            train(&data.spec, &ft.params, &data.train, None, &cfg)?.params
        }
    };
    Checkpoint::new(data.spec.clone(), params.clone())
        .with_seed("master", config.seed)
        .save(&model_dir.join("model.ckpt"))?;
    Ok(params)
}

/// Calibrates σ for the configured target ε at `delta` and trains DP-SGD.
pub fn run_dp_sgd(
    config: &RunConfig,
    data: &PreparedData,
    base: &ParameterVector,
    delta: f64,
    model_dir: &Path,
) -> Result<(ParameterVector, PrivacyReport)> {
    let d = &config.dp_sgd;
    let n = data.train.len();
    let q = d.batch_size as f64 / n as f64;
    let steps = dp_steps(n, d.batch_size, d.epochs);
    let sigma = calibrate_noise(d.target_epsilon, delta, q, steps).map_err(|e| e.in_phase("noise calibration"))?;
    let ledger = RdpLedger::new(q, sigma)?.compose(steps)?;
    let conversion = ledger.to_dp(delta)?;
    let cfg = TrainConfig::new(Optimizer::DpSgd, d.learning_rate, d.batch_size, d.epochs, config.seed("dp-sgd"))
        .with_dp(d.clip_norm, sigma)
        .with_dp_update(d.update)
        .with_weight_decay(config.model.weight_decay);
    let params = train(&data.spec, base, &data.train, None, &cfg)
        .map_err(|e| e.in_phase("dp-sgd training"))?
        .params;
    let privacy = PrivacyReport {
        mechanism: DP_SGD.to_string(),
        epsilon: conversion.budget.epsilon,
        delta: format!("{delta}"),
        sensitivity: None,
        draws: None,
        accountant: Some(AccountantReport {
            noise_multiplier: sigma,
            sampling_rate: q,
            steps,
            orders: ledger.orders.clone(),
            optimal_order: conversion.order,
            delta,
            epsilon: conversion.budget.epsilon,
            target_epsilon: d.target_epsilon,
        }),
    };
    fs::create_dir_all(model_dir)?;
    Checkpoint::new(data.spec.clone(), params.clone())
        .with_seed("master", config.seed)
        .with_seed("dp-sgd", config.seed("dp-sgd"))
        .save(&model_dir.join("model.ckpt"))?;
    fs::write(model_dir.join("ledger.json"), serde_json::to_vec_pretty(&ledger)?)?;
    privacy.save(&model_dir.join("privacy_report.json"))?;
    Ok((params, privacy))
}

/// Test-set evaluation of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub name: String,
    pub epsilon: Option<f64>,
    pub delta: String,
    pub f1_weighted: Option<f64>,
    pub f1_macro: Option<f64>,
    pub per_class_f1: Vec<f64>,
    pub quartiles: Option<QuartileReport>,
    pub tally: Option<ConfusionTally>,
    pub wall_clock_secs: f64,
    pub error: Option<String>,
}

impl ModelResult {
    fn failed(name: &str, delta: String, err: &Error, secs: f64) -> Self {
        ModelResult {
            name: name.to_string(),
            epsilon: None,
            delta,
            f1_weighted: None,
            f1_macro: None,
            per_class_f1: Vec::new(),
            quartiles: None,
            tally: None,
            wall_clock_secs: secs,
            error: Some(err.to_string()),
        }
    }

    pub fn summary_row(&self) -> SummaryRow {
        SummaryRow {
            model: self.name.clone(),
            epsilon: self.epsilon,
            delta: self.delta.clone(),
            f1_weighted: self.f1_weighted,
            f1_macro: self.f1_macro,
        }
    }
}

pub fn evaluate_model(
    name: &str,
    data: &PreparedData,
    params: &ParameterVector,
    epsilon: Option<f64>,
    delta: String,
    secs: f64,
) -> Result<ModelResult> {
    let tally = eval::evaluate(&data.spec, params, &data.test)?;
    Ok(ModelResult {
        name: name.to_string(),
        epsilon,
        delta,
        f1_weighted: Some(eval::weighted_f1(&tally)?),
        f1_macro: Some(eval::macro_f1(&tally)),
        per_class_f1: eval::f1_per_class(&tally),
        quartiles: Some(eval::quartile_report(&tally, &data.class_sizes)?),
        tally: Some(tally),
        wall_clock_secs: secs,
        error: None,
    })
}

/// One row of the δ sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub target_epsilon: Option<f64>,
    pub delta: String,
    pub f1_weighted: Option<f64>,
    pub f1_macro: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub models: Vec<ModelResult>,
    pub delta_sweep: Vec<SweepRow>,
    pub class_names: Vec<String>,
    pub class_sizes: Vec<usize>,
    pub test_sizes: Vec<usize>,
    pub train_sizes: Vec<usize>,
    /// Per training record: (record id, label, initial α, reweighted α).
    pub weights: Vec<(u64, usize, f64, f64)>,
}

impl BenchmarkResult {
    pub fn model(&self, name: &str) -> Option<&ModelResult> {
        self.models.iter().find(|m| m.name == name)
    }
}

enum Job {
    NonPrivate,
    SwagPpm { reweighted: bool },
    DpSgd { delta: f64 },
}

enum JobOutput {
    Plain(ModelResult),
    Swag(ModelResult, Box<SwagPpmOutcome>),
}

fn dir_name(name: &str) -> String {
    name.to_lowercase().replace(['(', ')'], "").replace(' ', "-")
}

fn run_job(config: &RunConfig, data: &PreparedData, base: &ParameterVector, job: &Job, out: &Path) -> JobOutput {
    let start = Instant::now();
    match job {
        Job::NonPrivate => {
            let r = run_nonprivate(config, data, base, &out.join(dir_name(NON_PRIVATE)))
                .and_then(|p| evaluate_model(NON_PRIVATE, data, &p, None, "–".into(), start.elapsed().as_secs_f64()));
            JobOutput::Plain(r.unwrap_or_else(|e| {
                log::error!("{NON_PRIVATE} failed: {e}");
                ModelResult::failed(NON_PRIVATE, "–".into(), &e, start.elapsed().as_secs_f64())
            }))
        }
        Job::SwagPpm { reweighted } => {
            let name = if *reweighted { SWAG_PPM_RW } else { SWAG_PPM };
            let outcome = run_swag_ppm(config, data, base, *reweighted, &out.join(dir_name(name)));
            match outcome.and_then(|o| {
                let r = evaluate_model(
                    name,
                    data,
                    &o.released,
                    Some(o.privacy.epsilon),
                    SWAG_PPM_DELTA.into(),
                    start.elapsed().as_secs_f64(),
                )?;
                Ok((r, o))
            }) {
                Ok((r, o)) => JobOutput::Swag(r, Box::new(o)),
                Err(e) => {
                    log::error!("{name} failed: {e}");
                    JobOutput::Plain(ModelResult::failed(
                        name,
                        SWAG_PPM_DELTA.into(),
                        &e,
                        start.elapsed().as_secs_f64(),
                    ))
                }
            }
        }
        Job::DpSgd { delta } => {
            let dir = out.join(dir_name(DP_SGD)).join(format!("delta-{delta}"));
            let r = run_dp_sgd(config, data, base, *delta, &dir).and_then(|(p, privacy)| {
                evaluate_model(
                    DP_SGD,
                    data,
                    &p,
                    Some(config.dp_sgd.target_epsilon),
                    format!("{delta}"),
                    start.elapsed().as_secs_f64(),
                )
                .map(|mut r| {
                    r.epsilon = privacy.accountant.map(|a| a.target_epsilon);
                    r
                })
            });
            JobOutput::Plain(r.unwrap_or_else(|e| {
                log::error!("{DP_SGD} (delta {delta}) failed: {e}");
                ModelResult::failed(DP_SGD, format!("{delta}"), &e, start.elapsed().as_secs_f64())
            }))
        }
    }
}

/// Trains and evaluates all four models plus the DP-SGD δ sweep, writes
/// every report under `config.out_dir`, and returns the collected results.
/// A failing model yields a row with its error; the others still run.
pub fn run_benchmark(config: &RunConfig) -> Result<BenchmarkResult> {
    let out = config.out_dir.clone();
    let data = prepare_data(config).map_err(|e| e.in_phase("data"))?;
    write_manifest(&out, config, &data)?;
    let base = base_init(config, &data)?;

    let main_delta = config.dp_sgd.delta;
    let mut jobs = vec![
        Job::NonPrivate,
        Job::SwagPpm { reweighted: false },
        Job::SwagPpm { reweighted: true },
        Job::DpSgd { delta: main_delta },
    ];
    for d in &config.benchmark.delta_sweep {
        if *d != main_delta {
            jobs.push(Job::DpSgd { delta: *d });
        }
    }
    let outputs: Vec<JobOutput> = jobs.par_iter().map(|j| run_job(config, &data, &base, j, &out)).collect();

    let mut models = Vec::new();
    let mut sweep_models = Vec::new();
    let mut outcomes: BTreeMap<String, Box<SwagPpmOutcome>> = BTreeMap::new();
    for (job, output) in jobs.iter().zip(outputs) {
        let result = match output {
            JobOutput::Plain(r) => r,
            JobOutput::Swag(r, o) => {
                outcomes.insert(r.name.clone(), o);
                r
            }
        };
        match job {
            Job::DpSgd { delta } if *delta != main_delta => sweep_models.push((*delta, result)),
            Job::DpSgd { delta } => {
                sweep_models.push((*delta, result.clone()));
                models.push(result);
            }
            _ => models.push(result),
        }
    }
    sweep_models.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut delta_sweep: Vec<SweepRow> = sweep_models
        .iter()
        .filter(|(d, _)| config.benchmark.delta_sweep.contains(d))
        .map(|(_, r)| SweepRow {
            method: DP_SGD.into(),
            target_epsilon: Some(config.dp_sgd.target_epsilon),
            delta: r.delta.clone(),
            f1_weighted: r.f1_weighted,
            f1_macro: r.f1_macro,
        })
        .collect();
    if let Some(r) = models.iter().find(|m| m.name == SWAG_PPM) {
        delta_sweep.push(SweepRow {
            method: SWAG_PPM.into(),
            target_epsilon: r.epsilon,
            delta: SWAG_PPM_DELTA.into(),
            f1_weighted: r.f1_weighted,
            f1_macro: r.f1_macro,
        });
    }

    let weights = match (outcomes.get(SWAG_PPM), outcomes.get(SWAG_PPM_RW)) {
        (Some(plain), rw) => {
            let initial = &plain.initial_weights;
            let rw_alphas = rw.map(|o| o.final_weights.alphas.clone());
            data.train
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let a_rw = rw_alphas.as_ref().map_or(f64::NAN, |a| a[i]);
                    (r.id, r.label, initial.alphas[i], a_rw)
                })
                .collect()
        }
        _ => Vec::new(),
    };

    let result = BenchmarkResult {
        models,
        delta_sweep,
        class_names: data.dataset.class_names.clone(),
        class_sizes: data.class_sizes.clone(),
        test_sizes: data.dataset.split_counts(Split::Test),
        train_sizes: data.dataset.split_counts(Split::Train),
        weights,
    };
    write_benchmark_reports(&result, &out)?;
    Ok(result)
}

fn f1_of(result: &BenchmarkResult, model: &str, class: usize) -> Option<f64> {
    result.model(model).and_then(|m| m.per_class_f1.get(class).copied())
}

pub fn per_class_rows(result: &BenchmarkResult) -> Vec<PerClassRow> {
    eval::classes_by_size(&result.class_sizes)
        .into_iter()
        .map(|c| PerClassRow {
            code: result.class_names[c].clone(),
            test_size: result.test_sizes[c] as u64,
            f1_nonprivate: f1_of(result, NON_PRIVATE, c),
            f1_swagppm: f1_of(result, SWAG_PPM, c),
            f1_dpsgd: f1_of(result, DP_SGD, c),
        })
        .collect()
}

fn sweep_markdown(rows: &[SweepRow]) -> String {
    let mut out = String::from("| method | target_epsilon | delta | f1_weighted | f1_macro |\n|---|---|---|---|---|\n");
    let f = |v: Option<f64>, d: usize| v.map_or("–".to_string(), |x| format!("{x:.d$}"));
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            r.method,
            f(r.target_epsilon, 2),
            r.delta,
            f(r.f1_weighted, 3),
            f(r.f1_macro, 3)
        ));
    }
    out
}

fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ClassSizeF1Row<'a> {
    code: &'a str,
    class_size: usize,
    train_size: usize,
    test_size: usize,
    model: &'a str,
    f1: f64,
}

#[derive(Serialize)]
struct WeightRow<'a> {
    record_id: u64,
    code: &'a str,
    class_size: usize,
    size_group: &'a str,
    alpha_initial: f64,
    alpha_reweighted: f64,
}

#[derive(Serialize)]
struct QuartileRow<'a> {
    model: &'a str,
    group: &'a str,
    f1_weighted: f64,
    f1_macro: f64,
}

/// Writes the summary, per-class, quartile, δ-sweep, class-size/F1 and
/// weight tables as CSV, the tables as Markdown, and the raw result as JSON.
pub fn write_benchmark_reports(result: &BenchmarkResult, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("benchmark.json"), serde_json::to_vec_pretty(result)?)?;

    let summary: Vec<SummaryRow> = result.models.iter().map(ModelResult::summary_row).collect();
    eval::write_summary(&summary, fs::File::create(out.join("summary.csv"))?)?;
    let per_class = per_class_rows(result);
    eval::write_per_class(&per_class, fs::File::create(out.join("per_class_f1.csv"))?)?;
    write_csv_rows(&out.join("delta_sweep.csv"), &result.delta_sweep)?;

    let mut quartile_rows = Vec::new();
    for m in &result.models {
        if let Some(q) = &m.quartiles {
            for (group, s) in [("top", q.top), ("bottom", q.bottom)] {
                quartile_rows.push(QuartileRow {
                    model: &m.name,
                    group,
                    f1_weighted: s.weighted,
                    f1_macro: s.macro_,
                });
            }
        }
    }
    write_csv_rows(&out.join("quartiles.csv"), &quartile_rows)?;

    let mut size_rows = Vec::new();
    for m in &result.models {
        for (c, f1) in m.per_class_f1.iter().enumerate() {
            size_rows.push(ClassSizeF1Row {
                code: &result.class_names[c],
                class_size: result.class_sizes[c],
                train_size: result.train_sizes[c],
                test_size: result.test_sizes[c],
                model: &m.name,
                f1: *f1,
            });
        }
    }
    write_csv_rows(&out.join("f1_by_class_size.csv"), &size_rows)?;

    let groups = size_groups(&result.class_sizes);
    let weight_rows: Vec<WeightRow> = result
        .weights
        .iter()
        .map(|(id, label, a0, aw)| WeightRow {
            record_id: *id,
            code: &result.class_names[*label],
            class_size: result.class_sizes[*label],
            size_group: groups[*label],
            alpha_initial: *a0,
            alpha_reweighted: *aw,
        })
        .collect();
    write_csv_rows(&out.join("weights_by_class_size.csv"), &weight_rows)?;

    fs::write(out.join("report.md"), render_markdown(result))?;
    Ok(())
}

/// `"top"`, `"bottom"` or `"middle"` for each class by size quartile.
pub fn size_groups(class_sizes: &[usize]) -> Vec<&'static str> {
    let mut groups = vec!["middle"; class_sizes.len()];
    if let Ok((top, bottom)) = eval::quartile_classes(class_sizes) {
        top.iter().for_each(|c| groups[*c] = "top");
        bottom.iter().for_each(|c| groups[*c] = "bottom");
    }
    groups
}

pub fn render_markdown(result: &BenchmarkResult) -> String {
    let summary: Vec<SummaryRow> = result.models.iter().map(ModelResult::summary_row).collect();
    let mut md = String::from("# Benchmark\n\n## Privacy and utility\n\n");
    md.push_str(&eval::summary_markdown(&summary));
    md.push_str("\n## Largest and smallest quarter of classes\n\n| model | group | f1_weighted | f1_macro |\n|---|---|---|---|\n");
    for m in &result.models {
        if let Some(q) = &m.quartiles {
            for (g, s) in [("top", q.top), ("bottom", q.bottom)] {
                md.push_str(&format!("| {} | {g} | {:.3} | {:.3} |\n", m.name, s.weighted, s.macro_));
            }
        }
    }
    md.push_str("\n## DP-SGD across delta\n\n");
    md.push_str(&sweep_markdown(&result.delta_sweep));
    md.push_str("\n## Per-class F1\n\n");
    md.push_str(&eval::per_class_markdown(&per_class_rows(result)));
    let failures: Vec<&ModelResult> = result.models.iter().filter(|m| m.error.is_some()).collect();
    if !failures.is_empty() {
        md.push_str("\n## Failures\n\n");
        for m in failures {
            md.push_str(&format!("- {}: {}\n", m.name, m.error.as_deref().unwrap_or("")));
        }
    }
    md
}

pub fn load_benchmark(dir: &Path) -> Result<BenchmarkResult> {
    Ok(serde_json::from_slice(&fs::read(dir.join("benchmark.json"))?)?)
}
