//! Pixel-level confusion counting, the six segmentation metrics and
//! fold-level aggregation.
//!
//! Degenerate conventions (empty foreground on either side) are explicit and
//! pinned by tests: with both prediction and ground truth empty, the overlap
//! ratios are 1; with exactly one side empty they are 0; specificity is 1
//! when there is no negative evidence (`tn + fp == 0`).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Pixel confusion counts for one (prediction, ground-truth) pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// The six metrics as fractions in `[0, 1]`, in reporting order: accuracy,
/// Jaccard, precision, recall, specificity, Dice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub dice: f64,
}

pub const METRIC_NAMES: [&str; 6] = [
    "accuracy",
    "jaccard",
    "precision",
    "recall",
    "specificity",
    "dice",
];

impl MetricsReport {
    pub fn values(&self) -> [f64; 6] {
        [
            self.accuracy,
            self.jaccard,
            self.precision,
            self.recall,
            self.specificity,
            self.dice,
        ]
    }

    fn from_values(v: [f64; 6]) -> Self {
        MetricsReport {
            accuracy: v[0],
            jaccard: v[1],
            precision: v[2],
            recall: v[3],
            specificity: v[4],
            dice: v[5],
        }
    }
}

/// Per-metric mean and population standard deviation over fold means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldAggregate {
    pub mean: MetricsReport,
    pub std: MetricsReport,
}

/// Binarize a probability mask: pixel -> 1 iff `prob >= t`.
pub fn threshold<T: Scalar>(prob: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!(
            "threshold must be in [0,1], got {t}"
        )));
    }
    let t = T::from_f64(t);
    Ok(prob.map(|v| if v >= t { T::one() } else { T::zero() }))
}

/// Count pixel agreement between two strictly binary masks of equal shape.
pub fn confusion<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "confusion",
            lhs: pred.shape().to_string(),
            rhs: gt.shape().to_string(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let pb = binary(p, "prediction")?;
        let gb = binary(g, "ground truth")?;
        match (pb, gb) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn binary<T: Scalar>(v: T, side: &str) -> Result<bool> {
    if v == T::one() {
        Ok(true)
    } else if v == T::zero() {
        Ok(false)
    } else {
        Err(Error::Numeric(format!(
            "confusion: {side} mask is not binary, found {v}"
        )))
    }
}

/// The six count ratios with the degenerate conventions above.
pub fn compute_metrics(c: &ConfusionCounts) -> MetricsReport {
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let total = tp + fp + tn + fn_;
    debug_assert!(total > 0.0, "empty confusion counts");
    let both_empty_ratio = |num: f64, den: f64| if den == 0.0 { 1.0 } else { num / den };
    let one_side = |own: f64, other: f64, num: f64, den: f64| {
        if den == 0.0 {
            // own side empty: 1 if the other is empty too, else 0
            if other == 0.0 && own == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            num / den
        }
    };
    MetricsReport {
        accuracy: (tp + tn) / total,
        jaccard: both_empty_ratio(tp, tp + fp + fn_),
        precision: one_side(tp + fp, fn_, tp, tp + fp),
        recall: one_side(tp + fn_, fp, tp, tp + fn_),
        specificity: both_empty_ratio(tn, tn + fp),
        dice: both_empty_ratio(2.0 * tp, 2.0 * tp + fp + fn_),
    }
}

/// Mean of each metric over a set of per-image reports.
pub fn mean_report(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::Config("cannot average an empty report list".into()));
    }
    let mut acc = [0.0f64; 6];
    for r in reports {
        for (a, v) in acc.iter_mut().zip(r.values()) {
            *a += v;
        }
    }
    let n = reports.len() as f64;
    Ok(MetricsReport::from_values(acc.map(|v| v / n)))
}

/// Average each fold's per-image reports, then report the mean and the
/// population standard deviation across the fold means.
pub fn aggregate_folds(per_fold: &[Vec<MetricsReport>]) -> Result<FoldAggregate> {
    if per_fold.is_empty() {
        return Err(Error::Config("aggregate_folds: no folds given".into()));
    }
    let fold_means: Vec<MetricsReport> = per_fold
        .iter()
        .enumerate()
        .map(|(i, reports)| {
            mean_report(reports).map_err(|_| Error::Config(format!("aggregate_folds: fold {i} is empty")))
        })
        .collect::<Result<_>>()?;
    Ok(aggregate_means(&fold_means))
}

fn aggregate_means(fold_means: &[MetricsReport]) -> FoldAggregate {
    let k = fold_means.len() as f64;
    let mut mean = [0.0f64; 6];
    for r in fold_means {
        for (a, v) in mean.iter_mut().zip(r.values()) {
            *a += v;
        }
    }
    for a in &mut mean {
        *a /= k;
    }
    let mut var = [0.0f64; 6];
    for r in fold_means {
        for ((a, v), m) in var.iter_mut().zip(r.values()).zip(mean) {
            *a += (v - m) * (v - m);
        }
    }
    FoldAggregate {
        mean: MetricsReport::from_values(mean),
        std: MetricsReport::from_values(var.map(|v| (v / k).sqrt())),
    }
}

/// One row of the metrics CSV.
#[derive(Clone, Debug)]
pub struct MetricsCsvRow {
    pub id: String,
    pub fold: Option<usize>,
    pub report: MetricsReport,
}

/// Write the evaluation CSV: one row per image, then a summary block with
/// per-fold means, the mean over folds, the across-fold standard deviation
/// (the headline spread) and the across-image standard deviation.
pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricsCsvRow]) -> Result<CsvSummary> {
    let io_err = |e: std::io::Error| Error::Io {
        path: "<metrics csv>".into(),
        source: e,
    };
    writeln!(
        w,
        "id,fold,accuracy,jaccard,precision,recall,specificity,dice"
    )
    .map_err(io_err)?;
    let fmt = |label: &str, fold: &str, r: &MetricsReport, w: &mut W| {
        let v = r.values();
        writeln!(
            w,
            "{label},{fold},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            v[0], v[1], v[2], v[3], v[4], v[5]
        )
        .map_err(io_err)
    };
    for row in rows {
        let fold = row.fold.map(|f| f.to_string()).unwrap_or_default();
        fmt(&row.id, &fold, &row.report, &mut w)?;
    }

    let mut folds: Vec<usize> = rows.iter().filter_map(|r| r.fold).collect();
    folds.sort_unstable();
    folds.dedup();
    let mut fold_means = Vec::new();
    for f in &folds {
        let members: Vec<MetricsReport> = rows
            .iter()
            .filter(|r| r.fold == Some(*f))
            .map(|r| r.report)
            .collect();
        let mean = mean_report(&members)?;
        fmt(&format!("fold{f}_mean"), &f.to_string(), &mean, &mut w)?;
        fmt(
            &format!("fold{f}_std"),
            &f.to_string(),
            &std_across(&members, &mean),
            &mut w,
        )?;
        fold_means.push(mean);
    }
    let all: Vec<MetricsReport> = rows.iter().map(|r| r.report).collect();
    let summary = if fold_means.len() > 1 {
        let agg = aggregate_means(&fold_means);
        fmt("mean_over_folds", "", &agg.mean, &mut w)?;
        fmt("std_over_folds", "", &agg.std, &mut w)?;
        agg
    } else {
        let mean = mean_report(&all)?;
        fmt("mean_over_images", "", &mean, &mut w)?;
        FoldAggregate {
            mean,
            std: MetricsReport::from_values([0.0; 6]),
        }
    };
    // spread across individual images, for comparison with the fold spread
    if all.len() > 1 {
        let mean = mean_report(&all)?;
        fmt("std_over_images", "", &std_across(&all, &mean), &mut w)?;
    }
    Ok(summary)
}

/// Population standard deviation of each metric around a given mean.
fn std_across(reports: &[MetricsReport], mean: &MetricsReport) -> MetricsReport {
    let mut var = [0.0f64; 6];
    for r in reports {
        for ((a, v), m) in var.iter_mut().zip(r.values()).zip(mean.values()) {
            *a += (v - m) * (v - m);
        }
    }
    let k = reports.len() as f64;
    MetricsReport::from_values(var.map(|v| (v / k).sqrt()))
}

/// Headline aggregate returned alongside the CSV.
pub type CsvSummary = FoldAggregate;
