//! Classification metrics: per-class F1, macro and weighted F1, and
//! aggregates over the largest and smallest quarter of classes.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict, ModelSpec, Record};
use crate::params::ParameterVector;

/// Per-class true-positive, false-positive and false-negative counts.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionTally {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl ConfusionTally {
    pub fn new(num_classes: usize) -> Self {
        ConfusionTally {
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
        }
    }

    pub fn from_counts(tp: Vec<u64>, fp: Vec<u64>, fn_: Vec<u64>) -> Result<Self> {
        if tp.len() != fp.len() || tp.len() != fn_.len() {
            return Err(Error::invalid("tally vectors differ in length"));
        }
        Ok(ConfusionTally { tp, fp, fn_ })
    }

    pub fn from_predictions(num_classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::invalid("truth and prediction lists differ in length"));
        }
        let mut t = ConfusionTally::new(num_classes);
        for (&y, &p) in truth.iter().zip(predicted) {
            if y >= num_classes || p >= num_classes {
                return Err(Error::invalid(format!("label out of range for {num_classes} classes")));
            }
            if y == p {
                t.tp[y] += 1;
            } else {
                t.fp[p] += 1;
                t.fn_[y] += 1;
            }
        }
        Ok(t)
    }

    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    /// Support `n_c = TP_c + FN_c`.
    pub fn support(&self) -> Vec<u64> {
        self.tp.iter().zip(&self.fn_).map(|(a, b)| a + b).collect()
    }

    pub fn accuracy(&self) -> f64 {
        let total: u64 = self.support().iter().sum();
        self.tp.iter().sum::<u64>() as f64 / total as f64
    }
}

/// Tally of `theta`'s argmax predictions on `records`.
pub fn evaluate(spec: &ModelSpec, theta: &ParameterVector, records: &[Record]) -> Result<ConfusionTally> {
    let truth: Vec<usize> = records.iter().map(|r| r.label).collect();
    let predicted = records
        .iter()
        .map(|r| predict(spec, theta, &r.features))
        .collect::<Result<Vec<_>>>()?;
    ConfusionTally::from_predictions(spec.num_classes, &truth, &predicted)
}

/// `2PR/(P+R)`, with 0 wherever precision or recall is undefined or both are zero.
pub fn f1_per_class(tally: &ConfusionTally) -> Vec<f64> {
    (0..tally.num_classes())
        .map(|c| {
            let (tp, fp, fn_) = (tally.tp[c] as f64, tally.fp[c] as f64, tally.fn_[c] as f64);
            if tp == 0.0 {
                return 0.0;
            }
            let p = tp / (tp + fp);
            let r = tp / (tp + fn_);
            2.0 * p * r / (p + r)
        })
        .collect()
}

/// Unweighted mean of per-class F1 over every class in the tally.
pub fn macro_f1(tally: &ConfusionTally) -> f64 {
    let f1 = f1_per_class(tally);
    if f1.is_empty() {
        return 0.0;
    }
    f1.iter().sum::<f64>() / f1.len() as f64
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(tally: &ConfusionTally) -> Result<f64> {
    subset_f1(tally, &(0..tally.num_classes()).collect::<Vec<_>>()).map(|s| s.weighted)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Summary {
    pub weighted: f64,
    pub macro_: f64,
}

fn subset_f1(tally: &ConfusionTally, classes: &[usize]) -> Result<F1Summary> {
    let f1 = f1_per_class(tally);
    let support = tally.support();
    let total: u64 = classes.iter().map(|&c| support[c]).sum();
    if total == 0 {
        return Err(Error::Empty("no test support in the selected classes".into()));
    }
    let weighted = classes.iter().map(|&c| support[c] as f64 * f1[c]).sum::<f64>() / total as f64;
    let macro_ = classes.iter().map(|&c| f1[c]).sum::<f64>() / classes.len() as f64;
    Ok(F1Summary { weighted, macro_ })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartileReport {
    pub top_classes: Vec<usize>,
    pub bottom_classes: Vec<usize>,
    pub top: F1Summary,
    pub bottom: F1Summary,
}

/// Classes ordered largest first; equal sizes keep label order.
pub fn classes_by_size(class_sizes: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..class_sizes.len()).collect();
    order.sort_by(|&a, &b| class_sizes[b].cmp(&class_sizes[a]).then(a.cmp(&b)));
    order
}

/// The `⌊m/4⌋` largest and `⌊m/4⌋` smallest classes by `class_sizes`.
pub fn quartile_classes(class_sizes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let m = class_sizes.len();
    if m < 4 {
        return Err(Error::invalid(format!("quartiles need at least 4 classes, got {m}")));
    }
    let q = m / 4;
    let order = classes_by_size(class_sizes);
    Ok((order[..q].to_vec(), order[m - q..].to_vec()))
}

/// Weighted and macro F1 restricted to the top and bottom quarter of classes by size.
pub fn quartile_report(tally: &ConfusionTally, class_sizes: &[usize]) -> Result<QuartileReport> {
    if class_sizes.len() != tally.num_classes() {
        return Err(Error::invalid("class size list does not match the tally"));
    }
    let (top_classes, bottom_classes) = quartile_classes(class_sizes)?;
    Ok(QuartileReport {
        top: subset_f1(tally, &top_classes)?,
        bottom: subset_f1(tally, &bottom_classes)?,
        top_classes,
        bottom_classes,
    })
}

/// One row of the per-class report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassRow {
    pub code: String,
    pub test_size: u64,
    pub f1_nonprivate: Option<f64>,
    pub f1_swagppm: Option<f64>,
    pub f1_dpsgd: Option<f64>,
}

pub fn write_per_class(rows: &[PerClassRow], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_per_class(reader: impl Read) -> Result<Vec<PerClassRow>> {
    let mut r = csv::Reader::from_reader(reader);
    Ok(r.deserialize().collect::<std::result::Result<Vec<PerClassRow>, _>>()?)
}

pub fn load_per_class(path: &Path) -> Result<Vec<PerClassRow>> {
    read_per_class(std::fs::File::open(path)?)
}

/// One row of the model comparison summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    /// Empty for models without a privacy guarantee.
    pub epsilon: Option<f64>,
    pub delta: String,
    pub f1_weighted: Option<f64>,
    pub f1_macro: Option<f64>,
}

pub fn write_summary(rows: &[SummaryRow], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "–".to_string(), |x| format!("{x:.digits$}"))
}

/// Markdown rendering of the summary table.
pub fn summary_markdown(rows: &[SummaryRow]) -> String {
    let mut out = String::from("| model | epsilon | delta | f1_weighted | f1_macro |\n|---|---|---|---|---|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            r.model,
            fmt_opt(r.epsilon, 2),
            r.delta,
            fmt_opt(r.f1_weighted, 3),
            fmt_opt(r.f1_macro, 3)
        ));
    }
    out
}

pub fn per_class_markdown(rows: &[PerClassRow]) -> String {
    let mut out = String::from(
        "| code | test_size | f1_nonprivate | f1_swagppm | f1_dpsgd |\n|---|---|---|---|---|\n",
    );
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            r.code,
            r.test_size,
            fmt_opt(r.f1_nonprivate, 2),
            fmt_opt(r.f1_swagppm, 2),
            fmt_opt(r.f1_dpsgd, 2)
        ));
    }
    out
}
