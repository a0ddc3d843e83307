//! Risk-weighted pseudo-posterior mechanism.
//!
//! Record risk is the largest absolute log-likelihood seen across posterior
//! draws. Risks are mapped linearly to weights `α_i ∈ [0, 1]`, the weighted
//! local sensitivity `Δ_α,D = max_i max_s α_i |ℓ_s(D_i)|` bounds the privacy
//! loss of one released draw at `ε = 2Δ_α,D`, and an optional re-weighting
//! pass lifts weights of records sitting well below that bound.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_container, save_container};
use crate::error::{Error, Result};
use crate::model::{log_likelihood, ModelSpec, Record};
use crate::params::ParameterVector;
use crate::swag::SwagMoments;

/// `|ℓ_{θ_s}(D_i)|` for S draws and n records, stored row-major by draw.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodMatrix {
    draws: usize,
    record_ids: Vec<u64>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixHeader {
    kind: String,
    draws: usize,
    record_ids: Vec<u64>,
}

const MATRIX_KIND: &str = "abs-loglik-matrix";

impl LikelihoodMatrix {
    /// Builds from rows, one per draw, each with one entry per record.
    pub fn from_rows(record_ids: Vec<u64>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if record_ids.is_empty() {
            return Err(Error::Empty("likelihood matrix has no records".into()));
        }
        if rows.is_empty() {
            return Err(Error::Empty("likelihood matrix has no draws".into()));
        }
        let n = record_ids.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::DimensionMismatch {
                tensor: "likelihood row".into(),
                expected: n,
                got: bad.len(),
            });
        }
        if rows.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("|ℓ| entries must be finite and nonnegative"));
        }
        let draws = rows.len();
        Ok(LikelihoodMatrix {
            draws,
            record_ids,
            values: rows.concat(),
        })
    }

    pub fn draws(&self) -> usize {
        self.draws
    }

    pub fn records(&self) -> usize {
        self.record_ids.len()
    }

    pub fn record_ids(&self) -> &[u64] {
        &self.record_ids
    }

    pub fn row(&self, draw: usize) -> &[f64] {
        let n = self.records();
        &self.values[draw * n..(draw + 1) * n]
    }

    pub fn get(&self, draw: usize, record: usize) -> f64 {
        self.values[draw * self.records() + record]
    }

    /// Per-record risk `r_i = max_s |ℓ_s(D_i)|`.
    pub fn risks(&self) -> Vec<f64> {
        let mut out = self.row(0).to_vec();
        for s in 1..self.draws {
            for (r, v) in out.iter_mut().zip(self.row(s)) {
                *r = r.max(*v);
            }
        }
        out
    }

    /// The first `draws` rows.
    pub fn prefix(&self, draws: usize) -> Result<Self> {
        if draws == 0 || draws > self.draws {
            return Err(Error::invalid(format!(
                "prefix of {draws} draws requested from a matrix with {}",
                self.draws
            )));
        }
        Ok(LikelihoodMatrix {
            draws,
            record_ids: self.record_ids.clone(),
            values: self.values[..draws * self.records()].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = MatrixHeader {
            kind: MATRIX_KIND.into(),
            draws: self.draws,
            record_ids: self.record_ids.clone(),
        };
        save_container(path, &header, &self.values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, values): (MatrixHeader, Vec<f64>) = load_container(path)?;
        if header.kind != MATRIX_KIND {
            return Err(Error::Format(format!("expected {MATRIX_KIND}, found {}", header.kind)));
        }
        if values.len() != header.draws * header.record_ids.len() {
            return Err(Error::Format("likelihood matrix payload has the wrong size".into()));
        }
        let n = header.record_ids.len();
        let rows = values.chunks(n.max(1)).map(<[f64]>::to_vec).collect();
        Self::from_rows(header.record_ids, rows)
    }
}

fn abs_ll_row(spec: &ModelSpec, theta: &ParameterVector, records: &[Record]) -> Result<Vec<f64>> {
    records
        .iter()
        .map(|r| log_likelihood(spec, theta, r).map(f64::abs))
        .collect()
}

/// Evaluates `|ℓ|` for every (draw, record) pair.
///
/// Draws are evaluated in parallel; rows keep draw order.
pub fn compute_risks(
    spec: &ModelSpec,
    draws: &[ParameterVector],
    records: &[Record],
) -> Result<LikelihoodMatrix> {
    if records.is_empty() {
        return Err(Error::Empty("no records to score".into()));
    }
    if draws.is_empty() {
        return Err(Error::Empty("at least one posterior draw is required".into()));
    }
    let rows = draws
        .par_iter()
        .map(|theta| abs_ll_row(spec, theta, records))
        .collect::<Result<Vec<_>>>()?;
    LikelihoodMatrix::from_rows(records.iter().map(|r| r.id).collect(), rows)
}

/// Same as [`compute_risks`] over `count` draws of [`SwagMoments::draw`],
/// generated on the fly so the draws are never held in memory together.
pub fn compute_risks_from_posterior(
    spec: &ModelSpec,
    moments: &SwagMoments,
    count: usize,
    seed: u64,
    records: &[Record],
) -> Result<LikelihoodMatrix> {
    if records.is_empty() {
        return Err(Error::Empty("no records to score".into()));
    }
    if count == 0 {
        return Err(Error::Empty("at least one posterior draw is required".into()));
    }
    let rows = (0..count)
        .into_par_iter()
        .map(|s| {
            let theta = moments.draw(seed, s as u64)?;
            abs_ll_row(spec, &theta, records)
        })
        .collect::<Result<Vec<_>>>()?;
    LikelihoodMatrix::from_rows(records.iter().map(|r| r.id).collect(), rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WeightStage {
    Initial,
    Reweighted(f64),
}

impl fmt::Display for WeightStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightStage::Initial => write!(f, "initial"),
            WeightStage::Reweighted(k) => write!(f, "reweighted({k})"),
        }
    }
}

impl FromStr for WeightStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "initial" {
            return Ok(WeightStage::Initial);
        }
        s.strip_prefix("reweighted(")
            .and_then(|rest| rest.strip_suffix(')'))
            .and_then(|k| k.parse().ok())
            .map(WeightStage::Reweighted)
            .ok_or_else(|| Error::Format(format!("unknown weight stage `{s}`")))
    }
}

/// Per-record risks and the weights derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskWeights {
    pub record_ids: Vec<u64>,
    pub risks: Vec<f64>,
    pub normalized_risks: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Scale `c` of the linear map.
    pub scale: f64,
    /// Shift `g` of the linear map.
    pub shift: f64,
    pub stage: WeightStage,
}

#[derive(Serialize, Deserialize)]
struct WeightRow {
    record_id: u64,
    risk: f64,
    normalized_risk: f64,
    alpha: f64,
    stage: String,
}

impl RiskWeights {
    pub fn len(&self) -> usize {
        self.record_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.record_ids.is_empty()
    }

    pub fn mean_alpha(&self) -> f64 {
        self.alphas.iter().sum::<f64>() / self.alphas.len() as f64
    }

    /// Every record at weight one; the mechanism then reduces to the plain posterior.
    pub fn uniform(record_ids: Vec<u64>) -> Self {
        let n = record_ids.len();
        RiskWeights {
            record_ids,
            risks: vec![0.0; n],
            normalized_risks: vec![0.0; n],
            alphas: vec![1.0; n],
            scale: 0.0,
            shift: 1.0,
            stage: WeightStage::Initial,
        }
    }

    pub fn write_csv(&self, writer: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let stage = self.stage.to_string();
        for i in 0..self.len() {
            w.serialize(WeightRow {
                record_id: self.record_ids[i],
                risk: self.risks[i],
                normalized_risk: self.normalized_risks[i],
                alpha: self.alphas[i],
                stage: stage.clone(),
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Reads the CSV form back. Mapping parameters are not stored in the file
    /// and come back as NaN.
    pub fn read_csv(reader: impl std::io::Read) -> Result<Self> {
        let mut out = RiskWeights {
            record_ids: Vec::new(),
            risks: Vec::new(),
            normalized_risks: Vec::new(),
            alphas: Vec::new(),
            scale: f64::NAN,
            shift: f64::NAN,
            stage: WeightStage::Initial,
        };
        for row in csv::Reader::from_reader(reader).deserialize() {
            let row: WeightRow = row?;
            out.record_ids.push(row.record_id);
            out.risks.push(row.risk);
            out.normalized_risks.push(row.normalized_risk);
            out.alphas.push(row.alpha);
            out.stage = row.stage.parse()?;
        }
        Ok(out)
    }
}

/// Linear risk-to-weight map `α_i = clip(c·(1 − r̃_i) + g, 0, 1)` with
/// `r̃` the min-max normalised risk.
pub fn map_weights(record_ids: &[u64], risks: &[f64], c: f64, g: f64) -> Result<RiskWeights> {
    if risks.len() < 2 {
        return Err(Error::invalid("weight mapping needs at least two records"));
    }
    if record_ids.len() != risks.len() {
        return Err(Error::DimensionMismatch {
            tensor: "risks".into(),
            expected: record_ids.len(),
            got: risks.len(),
        });
    }
    if !(c >= 0.0 && c.is_finite()) || !g.is_finite() {
        return Err(Error::invalid("mapping requires finite c >= 0 and finite g"));
    }
    if risks.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::invalid("risks must be finite and nonnegative"));
    }
    let lo = risks.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = risks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let normalized_risks: Vec<f64> = if hi > lo {
        risks.iter().map(|r| (r - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; risks.len()]
    };
    let alphas = normalized_risks
        .iter()
        .map(|nr| (c * (1.0 - nr) + g).clamp(0.0, 1.0))
        .collect();
    Ok(RiskWeights {
        record_ids: record_ids.to_vec(),
        risks: risks.to_vec(),
        normalized_risks,
        alphas,
        scale: c,
        shift: g,
        stage: WeightStage::Initial,
    })
}

/// Weighted local sensitivity over a finite set of posterior draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    /// `Δ_α,D`.
    pub delta: f64,
    /// `Δ_α,D_i = max_s α_i |ℓ_s(D_i)|`.
    pub per_record: Vec<f64>,
    /// `max_s |ℓ_s(D_i)|`, kept so re-weighting can treat zero-weight records.
    pub per_record_unweighted: Vec<f64>,
    pub record_ids: Vec<u64>,
    pub argmax_draw: usize,
    pub argmax_record_id: u64,
    pub draws: usize,
    /// `2 Δ_α,D`.
    pub epsilon: f64,
}

pub fn sensitivity(matrix: &LikelihoodMatrix, alphas: &[f64]) -> Result<SensitivityReport> {
    let n = matrix.records();
    if alphas.len() != n {
        return Err(Error::DimensionMismatch {
            tensor: "alpha".into(),
            expected: n,
            got: alphas.len(),
        });
    }
    let mut per_record = vec![0.0f64; n];
    let mut per_record_unweighted = vec![0.0f64; n];
    let mut best_draw = vec![0usize; n];
    for s in 0..matrix.draws() {
        for (i, v) in matrix.row(s).iter().enumerate() {
            let weighted = alphas[i] * v;
            if weighted > per_record[i] {
                per_record[i] = weighted;
                best_draw[i] = s;
            }
            per_record_unweighted[i] = per_record_unweighted[i].max(*v);
        }
    }
    let mut arg = 0;
    for i in 1..n {
        if per_record[i] > per_record[arg] {
            arg = i;
        }
    }
    let delta = per_record[arg];
    Ok(SensitivityReport {
        delta,
        per_record,
        per_record_unweighted,
        record_ids: matrix.record_ids().to_vec(),
        argmax_draw: best_draw[arg],
        argmax_record_id: matrix.record_ids()[arg],
        draws: matrix.draws(),
        epsilon: 2.0 * delta,
    })
}

impl SensitivityReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// `α^w_i = clip(k · α_i · Δ_α,D / Δ_α,D_i, 0, 1)`.
///
/// A record with `Δ_α,D_i = 0` either had zero weight or zero measured loss.
/// Zero loss gives weight one. Zero weight takes the limit of the formula as
/// `α_i → 0`, i.e. `k Δ_α,D / max_s |ℓ_s(D_i)|`, which places the record's
/// weighted risk at `k Δ_α,D` like every other unclipped record.
pub fn reweight(weights: &RiskWeights, report: &SensitivityReport, k: f64) -> Result<RiskWeights> {
    if !(k > 0.0 && k < 1.0) {
        return Err(Error::invalid(format!("reweighting constant k = {k} must lie in (0, 1)")));
    }
    if report.delta <= 0.0 {
        return Err(Error::invalid("re-weighting is undefined when Δ_α,D = 0"));
    }
    if weights.record_ids != report.record_ids {
        return Err(Error::invalid("weights and sensitivity report cover different records"));
    }
    let alphas = weights
        .alphas
        .iter()
        .zip(&report.per_record)
        .zip(&report.per_record_unweighted)
        .map(|((alpha, d_i), raw)| {
            if *d_i > 0.0 {
                (k * alpha * (report.delta / d_i)).clamp(0.0, 1.0)
            } else if *raw > 0.0 {
                (k * (report.delta / raw)).clamp(0.0, 1.0)
            } else {
                1.0
            }
        })
        .collect();
    Ok(RiskWeights {
        alphas,
        stage: WeightStage::Reweighted(k),
        ..weights.clone()
    })
}
