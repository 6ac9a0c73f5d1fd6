//! Evaluation metrics over predictions, labels and groups.
//!
//! Groups are whatever the evaluated dataset carries: callers degenerate a
//! split to classes when its attributes are unknown, which turns every
//! group metric into its per-class counterpart.

use std::cmp::Ordering;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Prediction};
use crate::error::{Error, Result};

pub const DEFAULT_ECE_BINS: usize = 10;

/// Probability floor inside logarithms.
const PROB_FLOOR: f64 = 1e-300;

/// `counts[true][predicted]`.
pub fn confusion_matrix(predicted: &[usize], labels: &[usize], num_classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &y) in predicted.iter().zip(labels) {
        m[y][p] += 1;
    }
    m
}

/// Accuracy of each group; `None` for groups with no examples.
pub fn group_accuracies(
    predicted: &[usize],
    labels: &[usize],
    groups: &[usize],
    num_groups: usize,
) -> Vec<Option<f64>> {
    let mut hit = vec![0u64; num_groups];
    let mut total = vec![0u64; num_groups];
    for ((&p, &y), &g) in predicted.iter().zip(labels).zip(groups) {
        total[g] += 1;
        if p == y {
            hit[g] += 1;
        }
    }
    hit.iter()
        .zip(&total)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect()
}

fn present(values: &[Option<f64>], what: &str) -> Result<Vec<f64>> {
    let skipped = values.iter().filter(|v| v.is_none()).count();
    if skipped > 0 {
        warn!("{skipped} empty {what}(s) skipped");
    }
    let out: Vec<f64> = values.iter().flatten().copied().collect();
    if out.is_empty() {
        return Err(Error::Undefined(format!("no nonempty {what}")));
    }
    Ok(out)
}

fn min(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::INFINITY, f64::min)
}

fn max(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn worst_group_accuracy(
    predicted: &[usize],
    labels: &[usize],
    groups: &[usize],
    num_groups: usize,
) -> Result<f64> {
    Ok(min(&present(&group_accuracies(predicted, labels, groups, num_groups), "group")?))
}

/// Unweighted mean of per-group accuracies.
pub fn adjusted_accuracy(
    predicted: &[usize],
    labels: &[usize],
    groups: &[usize],
    num_groups: usize,
) -> Result<f64> {
    Ok(mean(&present(&group_accuracies(predicted, labels, groups, num_groups), "group")?))
}

/// Unweighted mean of per-class recalls.
pub fn balanced_accuracy(predicted: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    Ok(mean(&present(&class_stats(predicted, labels, num_classes).recall, "class")?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub support: Vec<u64>,
    /// `TP / (TP + FP)`; 0 for a class that is never predicted.
    pub precision: Vec<f64>,
    /// `None` for a class absent from the labels.
    pub recall: Vec<Option<f64>>,
    pub f1: Vec<Option<f64>>,
}

pub fn class_stats(predicted: &[usize], labels: &[usize], num_classes: usize) -> ClassStats {
    let cm = confusion_matrix(predicted, labels, num_classes);
    let support: Vec<u64> = cm.iter().map(|r| r.iter().sum()).collect();
    let mut precision = Vec::with_capacity(num_classes);
    let mut recall = Vec::with_capacity(num_classes);
    let mut f1 = Vec::with_capacity(num_classes);
    for k in 0..num_classes {
        let tp = cm[k][k] as f64;
        let predicted_k: u64 = cm.iter().map(|r| r[k]).sum();
        let p = if predicted_k == 0 {
            if support[k] > 0 {
                warn!("class {k} is never predicted; its precision is taken as 0");
            }
            0.0
        } else {
            tp / predicted_k as f64
        };
        let r = (support[k] > 0).then(|| tp / support[k] as f64);
        precision.push(p);
        f1.push(r.map(|r| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) }));
        recall.push(r);
    }
    ClassStats {
        support,
        precision,
        recall,
        f1,
    }
}

/// Equal-width bins over the max probability; confidence `c` falls in bin
/// `ceil(c·B) − 1` (so `c = 1` lands in the last bin, `c = 0` in the first).
pub fn ece(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<f64> {
    if probs.is_empty() || bins == 0 {
        return Err(Error::Undefined("ECE of an empty sample".into()));
    }
    let mut count = vec![0usize; bins];
    let mut hits = vec![0.0; bins];
    let mut conf = vec![0.0; bins];
    for (p, &y) in probs.iter().zip(labels) {
        let pred = Prediction::from_probs(p.clone());
        let c = pred.confidence();
        let b = ((c * bins as f64).ceil() as usize).saturating_sub(1).min(bins - 1);
        count[b] += 1;
        conf[b] += c;
        if pred.predicted == y {
            hits[b] += 1.0;
        }
    }
    let n = probs.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (hits[b] - conf[b]).abs() / n)
        .sum())
}

/// Mean negative log-likelihood of the true class (nats).
pub fn cross_entropy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Undefined("cross-entropy of an empty sample".into()));
    }
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| -p[y].max(PROB_FLOOR).ln())
        .sum::<f64>()
        / probs.len() as f64)
}

fn check_binary(scores: &[f64], positives: &[bool]) -> Result<(usize, usize)> {
    let pos = positives.iter().filter(|&&p| p).count();
    let neg = positives.len() - pos;
    if scores.len() != positives.len() {
        return Err(Error::InvalidData("scores and labels differ in length".into()));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("ranking metric needs both classes present".into()));
    }
    Ok((pos, neg))
}

/// Mann–Whitney rank statistic with average ranks for ties.
pub fn auroc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, positives)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += avg_rank * order[i..=j].iter().filter(|&&k| positives[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Step-wise area under the precision–recall curve (average precision);
/// tied scores enter as one threshold.
pub fn auprc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    let (pos, _) = check_binary(scores, positives)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        loop {
            if positives[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
            if j == order.len() || scores[order[j]] != scores[order[i]] {
                break;
            }
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(area)
}

/// Mean squared error of the positive-class probability.
pub fn brier(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Undefined("Brier score of an empty sample".into()));
    }
    Ok(scores
        .iter()
        .zip(positives)
        .map(|(&s, &p)| (s - if p { 1.0 } else { 0.0 }).powi(2))
        .sum::<f64>()
        / scores.len() as f64)
}

/// Population standard deviation.
fn std_dev(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub avg_acc: f64,
    /// Minimum over the dataset's nonempty groups.
    pub worst_group_acc: f64,
    pub worst_class_acc: f64,
    pub adjusted_acc: f64,
    pub balanced_acc: f64,
    pub avg_precision: f64,
    pub worst_precision: f64,
    /// Support-weighted mean of per-class precision.
    pub weighted_precision: f64,
    pub avg_f1: f64,
    pub worst_f1: f64,
    /// Max minus min per-class accuracy.
    pub class_acc_diff: f64,
    pub recall_std: f64,
    pub ece: f64,
    pub bce: f64,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub brier: Option<f64>,
    pub per_group_acc: Vec<Option<f64>>,
    pub per_class: ClassStats,
}

/// Full report for predictions on `data`. Binary-only metrics are `None`
/// for `C ≠ 2` or when one class is missing.
pub fn evaluate(preds: &[Prediction], data: &Dataset) -> Result<MetricsReport> {
    if preds.len() != data.len() {
        return Err(Error::InvalidData(format!(
            "{} predictions for {} examples",
            preds.len(),
            data.len()
        )));
    }
    if data.is_empty() {
        return Err(Error::Undefined("metrics of an empty split".into()));
    }
    if preds.iter().any(|p| p.probs.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("predicted probabilities".into()));
    }
    let c = data.num_classes();
    let predicted: Vec<usize> = preds.iter().map(|p| p.predicted).collect();
    let labels = data.labels();
    let groups: Vec<usize> = (0..data.len()).map(|i| data.group_index(i)).collect();
    let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();

    let per_group_acc = group_accuracies(&predicted, &labels, &groups, data.num_groups());
    let group_accs = present(&per_group_acc, "group")?;
    let stats = class_stats(&predicted, &labels, c);
    let recalls: Vec<f64> = stats.recall.iter().flatten().copied().collect();
    let present_classes: Vec<usize> = (0..c).filter(|&k| stats.support[k] > 0).collect();
    let precisions: Vec<f64> = present_classes.iter().map(|&k| stats.precision[k]).collect();
    let f1s: Vec<f64> = stats.f1.iter().flatten().copied().collect();
    let correct = predicted.iter().zip(&labels).filter(|(p, y)| p == y).count();

    let (auroc_v, auprc_v, brier_v) = if c == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let positives: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        (
            auroc(&scores, &positives).ok(),
            auprc(&scores, &positives).ok(),
            brier(&scores, &positives).ok(),
        )
    } else {
        (None, None, None)
    };

    Ok(MetricsReport {
        n: data.len(),
        avg_acc: correct as f64 / data.len() as f64,
        worst_group_acc: min(&group_accs),
        worst_class_acc: min(&recalls),
        adjusted_acc: mean(&group_accs),
        balanced_acc: mean(&recalls),
        avg_precision: mean(&precisions),
        worst_precision: min(&precisions),
        weighted_precision: present_classes
            .iter()
            .map(|&k| stats.precision[k] * stats.support[k] as f64)
            .sum::<f64>()
            / data.len() as f64,
        avg_f1: mean(&f1s),
        worst_f1: min(&f1s),
        class_acc_diff: max(&recalls) - min(&recalls),
        recall_std: std_dev(&recalls),
        ece: ece(&probs, &labels, DEFAULT_ECE_BINS)?,
        bce: cross_entropy(&probs, &labels)?,
        auroc: auroc_v,
        auprc: auprc_v,
        brier: brier_v,
        per_group_acc,
        per_class: stats,
    })
}

/// Scalar fields of [`MetricsReport`] addressable by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    AvgAcc,
    WorstGroupAcc,
    WorstClassAcc,
    AdjustedAcc,
    BalancedAcc,
    AvgPrecision,
    WorstPrecision,
    WeightedPrecision,
    AvgF1,
    WorstF1,
    ClassAccDiff,
    RecallStd,
    Ece,
    Bce,
    Auroc,
    Auprc,
    Brier,
}

impl Metric {
    pub const ALL: [Metric; 17] = [
        Metric::AvgAcc,
        Metric::WorstGroupAcc,
        Metric::WorstClassAcc,
        Metric::AdjustedAcc,
        Metric::BalancedAcc,
        Metric::AvgPrecision,
        Metric::WorstPrecision,
        Metric::WeightedPrecision,
        Metric::AvgF1,
        Metric::WorstF1,
        Metric::ClassAccDiff,
        Metric::RecallStd,
        Metric::Ece,
        Metric::Bce,
        Metric::Auroc,
        Metric::Auprc,
        Metric::Brier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::AvgAcc => "avg_acc",
            Metric::WorstGroupAcc => "worst_group_acc",
            Metric::WorstClassAcc => "worst_class_acc",
            Metric::AdjustedAcc => "adjusted_acc",
            Metric::BalancedAcc => "balanced_acc",
            Metric::AvgPrecision => "avg_precision",
            Metric::WorstPrecision => "worst_precision",
            Metric::WeightedPrecision => "weighted_precision",
            Metric::AvgF1 => "avg_f1",
            Metric::WorstF1 => "worst_f1",
            Metric::ClassAccDiff => "class_acc_diff",
            Metric::RecallStd => "recall_std",
            Metric::Ece => "ece",
            Metric::Bce => "bce",
            Metric::Auroc => "auroc",
            Metric::Auprc => "auprc",
            Metric::Brier => "brier",
        }
    }

    pub fn value(self, r: &MetricsReport) -> Option<f64> {
        Some(match self {
            Metric::AvgAcc => r.avg_acc,
            Metric::WorstGroupAcc => r.worst_group_acc,
            Metric::WorstClassAcc => r.worst_class_acc,
            Metric::AdjustedAcc => r.adjusted_acc,
            Metric::BalancedAcc => r.balanced_acc,
            Metric::AvgPrecision => r.avg_precision,
            Metric::WorstPrecision => r.worst_precision,
            Metric::WeightedPrecision => r.weighted_precision,
            Metric::AvgF1 => r.avg_f1,
            Metric::WorstF1 => r.worst_f1,
            Metric::ClassAccDiff => r.class_acc_diff,
            Metric::RecallStd => r.recall_std,
            Metric::Ece => r.ece,
            Metric::Bce => r.bce,
            Metric::Auroc => return r.auroc,
            Metric::Auprc => return r.auprc,
            Metric::Brier => return r.brier,
        })
    }
}

/// Orders two metric values, treating `None` as worse than any value.
pub fn compare_optional(a: Option<f64>, b: Option<f64>) -> Ordering {
    match (a, b) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => Ordering::Greater,
        (None, Some(_)) => Ordering::Less,
        (None, None) => Ordering::Equal,
    }
}
