//! Confusion matrices, per-class IoU and run reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;

/// `K x K` pixel counts; rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.shape() != truth.shape() {
            return Err(Error::ShapeMismatch {
                op: "confusion accumulate",
                lhs: pred.shape().to_vec(),
                rhs: truth.shape().to_vec(),
            });
        }
        let k = self.classes;
        if pred.max_label() as usize >= k || truth.max_label() as usize >= k {
            return Err(Error::invalid("confusion accumulate", format!("label out of range for {k} classes")));
        }
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::invalid("confusion merge", "class counts differ"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class. Classes absent from both truth and
    /// prediction are `None` and left out of the mean; classes predicted but
    /// absent from truth score 0.
    pub fn iou(&self) -> IouSummary {
        let k = self.classes;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..k).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|t| self.get(t, c)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        IouSummary { per_class, miou }
    }

    /// Fraction of pixels on the diagonal.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.classes).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouSummary {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Evaluation result of one model on the held-out target split, with run
/// metadata. IoU values are fractions in `[0, 1]`; tables print percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub name: String,
    pub stage: String,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    #[serde(default)]
    pub untrusted_fraction: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub wall_clock_secs: f64,
}

impl MetricsReport {
    /// The report with wall-clock time zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> MetricsReport {
        MetricsReport {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_else(|| "-".into())
}

/// Aligned table: one row per report, per-class IoU columns, mIoU and the
/// difference in mIoU against `baseline` when given.
pub fn format_table(rows: &[&MetricsReport], class_names: &[String], baseline: Option<&MetricsReport>) -> String {
    let name_w = rows.iter().map(|r| r.name.len()).chain([6]).max().unwrap_or(6);
    let col_w = class_names.iter().map(|n| n.len()).chain([5]).max().unwrap_or(5);
    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}", "Method");
    for n in class_names {
        let _ = write!(out, " | {n:>col_w$}");
    }
    let _ = write!(out, " | {:>5}", "mIoU");
    if baseline.is_some() {
        let _ = write!(out, " | {:>6}", "Δ");
    }
    out.push('\n');
    let width = out.chars().count() - 1;
    out.push_str(&"-".repeat(width));
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{:<name_w$}", r.name);
        for c in 0..class_names.len() {
            let _ = write!(out, " | {:>col_w$}", pct(r.per_class_iou.get(c).copied().flatten()));
        }
        let _ = write!(out, " | {:>5.1}", 100.0 * r.miou);
        if let Some(b) = baseline {
            let _ = write!(out, " | {:>+6.1}", 100.0 * (r.miou - b.miou));
        }
        out.push('\n');
    }
    out
}
