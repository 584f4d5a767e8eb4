//! MAE, Pearson correlation, 7-class and binary accuracy, and F1.
//!
//! Binary sentiment is scored under two conventions:
//! * negative / non-negative: all samples, `y >= 0` is the positive class;
//! * negative / positive: samples with label exactly 0 are dropped and
//!   `y > 0` is the positive class.
//!
//! 7-class accuracy rounds (half away from zero) and clamps both prediction
//! and label to the integers in `[-3, 3]`.

use serde::{Deserialize, Serialize};

use super::{Label, Task};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryScores {
    pub accuracy: f64,
    /// Harmonic mean of precision and recall on the positive class.
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub mse: f64,
    /// `None` when either side has zero variance.
    pub corr: Option<f64>,
    pub acc7: f64,
    pub non_negative: BinaryScores,
    /// `None` when every label is exactly 0.
    pub positive: Option<BinaryScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    /// One-vs-rest scores with class `k` as the positive class.
    pub per_class: Vec<BinaryScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum MetricReport {
    Regression(RegressionMetrics),
    Classification(ClassificationMetrics),
}

impl MetricReport {
    pub fn as_regression(&self) -> Option<&RegressionMetrics> {
        match self {
            MetricReport::Regression(r) => Some(r),
            MetricReport::Classification(_) => None,
        }
    }
}

pub fn mean_absolute_error(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64
}

pub fn mean_squared_error(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

/// Pearson correlation, or `None` if either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Accuracy and positive-class F1. F1 is 1 when there is nothing to find
/// (no positive labels and no positive predictions).
pub fn binary_scores(pred: &[bool], truth: &[bool]) -> BinaryScores {
    let (mut tp, mut fp, mut fneg, mut agree) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
        agree += usize::from(p == t);
    }
    let denom = 2 * tp + fp + fneg;
    BinaryScores {
        accuracy: agree as f64 / pred.len() as f64,
        f1: if denom == 0 {
            1.0
        } else {
            2.0 * tp as f64 / denom as f64
        },
        support: pred.len(),
    }
}

fn seven_class(v: f64) -> i64 {
    v.round().clamp(-3.0, 3.0) as i64
}

pub fn regression_metrics(pred: &[f64], truth: &[f64]) -> Result<RegressionMetrics> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::InvalidArgument {
            op: "metrics",
            msg: format!("{} predictions for {} labels", pred.len(), truth.len()),
        });
    }
    let acc7 = pred
        .iter()
        .zip(truth)
        .filter(|(p, t)| seven_class(**p) == seven_class(**t))
        .count() as f64
        / pred.len() as f64;

    let nn_pred: Vec<bool> = pred.iter().map(|p| *p >= 0.0).collect();
    let nn_truth: Vec<bool> = truth.iter().map(|t| *t >= 0.0).collect();

    let (pos_pred, pos_truth): (Vec<bool>, Vec<bool>) = pred
        .iter()
        .zip(truth)
        .filter(|(_, t)| **t != 0.0)
        .map(|(p, t)| (*p > 0.0, *t > 0.0))
        .unzip();

    Ok(RegressionMetrics {
        mae: mean_absolute_error(pred, truth),
        mse: mean_squared_error(pred, truth),
        corr: pearson(pred, truth),
        acc7,
        non_negative: binary_scores(&nn_pred, &nn_truth),
        positive: (!pos_truth.is_empty()).then(|| binary_scores(&pos_pred, &pos_truth)),
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn classification_metrics(logits: &[Vec<f64>], classes: &[usize], num_classes: usize) -> Result<ClassificationMetrics> {
    if logits.is_empty() || logits.len() != classes.len() {
        return Err(Error::InvalidArgument {
            op: "metrics",
            msg: format!("{} predictions for {} labels", logits.len(), classes.len()),
        });
    }
    if let Some(row) = logits.iter().find(|r| r.len() != num_classes) {
        return Err(Error::shape("metrics", &[num_classes], &[row.len()]));
    }
    let predicted: Vec<usize> = logits.iter().map(|r| argmax(r)).collect();
    let accuracy = predicted.iter().zip(classes).filter(|(p, c)| p == c).count() as f64
        / classes.len() as f64;
    let per_class = (0..num_classes)
        .map(|k| {
            let p: Vec<bool> = predicted.iter().map(|&c| c == k).collect();
            let t: Vec<bool> = classes.iter().map(|&c| c == k).collect();
            binary_scores(&p, &t)
        })
        .collect();
    Ok(ClassificationMetrics {
        accuracy,
        per_class,
    })
}

/// Scores model outputs (one row per sample) against labels.
pub fn metrics(preds: &[Vec<f64>], labels: &[Label], task: Task) -> Result<MetricReport> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument {
            op: "metrics",
            msg: "empty input".into(),
        });
    }
    match task {
        Task::Regression => {
            let p: Vec<f64> = preds.iter().map(|r| r[0]).collect();
            let t = labels
                .iter()
                .map(|l| match l {
                    Label::Intensity(y) => Ok(*y),
                    Label::Class(_) => Err(Error::data("class label in regression task")),
                })
                .collect::<Result<Vec<_>>>()?;
            regression_metrics(&p, &t).map(MetricReport::Regression)
        }
        Task::Classification { num_classes } => {
            let c = labels
                .iter()
                .map(|l| match l {
                    Label::Class(c) => Ok(*c as usize),
                    Label::Intensity(_) => Err(Error::data("intensity label in classification task")),
                })
                .collect::<Result<Vec<_>>>()?;
            classification_metrics(preds, &c, num_classes).map(MetricReport::Classification)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictor() {
        let y = [-2.0, -0.5, 0.0, 1.0, 2.7];
        let m = regression_metrics(&y, &y).unwrap();
        assert_eq!(m.mae, 0.0);
        assert_eq!(m.corr, Some(1.0));
        assert_eq!(m.acc7, 1.0);
        assert_eq!(m.non_negative.accuracy, 1.0);
        assert_eq!(m.non_negative.f1, 1.0);
        let pos = m.positive.unwrap();
        assert_eq!((pos.accuracy, pos.f1, pos.support), (1.0, 1.0, 4));
    }

    #[test]
    fn antipodal_predictor() {
        let y = [-2.0, -0.5, 1.0, 2.5];
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        let m = regression_metrics(&neg, &y).unwrap();
        assert!((m.corr.unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_input_gives_no_correlation() {
        let m = regression_metrics(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(m.corr, None);
        assert!(serde_json::to_string(&m).unwrap().contains("\"corr\":null"));
    }

    #[test]
    fn pearson_is_affine_invariant() {
        let x = [0.3, -1.2, 2.2, 0.9, -0.1];
        let y = [0.1, -1.0, 1.7, 1.3, 0.2];
        let r = pearson(&x, &y).unwrap();
        let x2: Vec<f64> = x.iter().map(|v| 3.5 * v - 7.0).collect();
        assert!((pearson(&x2, &y).unwrap() - r).abs() < 1e-12);
    }

    #[test]
    fn empty_and_mismatched_inputs_error() {
        assert!(regression_metrics(&[], &[]).is_err());
        assert!(regression_metrics(&[1.0], &[1.0, 2.0]).is_err());
        assert!(metrics(&[], &[], Task::Regression).is_err());
        assert!(metrics(&[vec![1.0]], &[Label::Class(0)], Task::Regression).is_err());
    }

    #[test]
    fn classification_one_vs_rest() {
        let logits = vec![
            vec![2.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0],
            vec![0.0, 2.0, 0.0],
            vec![0.0, 0.0, 2.0],
        ];
        let m = classification_metrics(&logits, &[0, 1, 2, 2], 3).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.per_class[0].f1, 1.0);
        // class 1: tp 1, fp 1, fn 0
        assert!((m.per_class[1].f1 - 2.0 / 3.0).abs() < 1e-15);
        // class 2: tp 1, fp 0, fn 1
        assert!((m.per_class[2].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.per_class[2].accuracy, 0.75);
    }
}
