//! Score-separation and dollar-weighted ranking metrics.
//!
//! All functions are pure. Scores are higher-is-riskier; labels are 0/1.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Data(format!("non-finite score {s}")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Data(format!("label {l} is not 0 or 1")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data(format!("both classes are required, got {pos} positives and {neg} negatives")));
    }
    Ok((pos, neg))
}

/// Indices ordered by ascending score.
fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Groups of equal scores in sorted order, as index ranges into `order`.
fn tie_groups<'a>(scores: &'a [f64], order: &'a [usize]) -> impl Iterator<Item = std::ops::Range<usize>> + 'a {
    let mut start = 0;
    std::iter::from_fn(move || {
        if start >= order.len() {
            return None;
        }
        let s = scores[order[start]];
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == s {
            end += 1;
        }
        let r = start..end;
        start = end;
        Some(r)
    })
}

/// Two-sample KS distance between positive and negative score
/// distributions, on a 0–100 scale.
pub fn ks_statistic(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let order = ascending(scores);
    let (mut cp, mut cn, mut best) = (0usize, 0usize, 0f64);
    for g in tie_groups(scores, &order) {
        for &i in &order[g] {
            if labels[i] == 1 {
                cp += 1;
            } else {
                cn += 1;
            }
        }
        let gap = (cp as f64 / pos as f64 - cn as f64 / neg as f64).abs();
        best = best.max(gap);
    }
    Ok(100.0 * best)
}

/// Information Value over rank-based quantile bins.
///
/// Records are assigned to `bins` equal-count bins by rank; a run of tied
/// scores goes entirely to the bin of its first member, so some bins may
/// end up empty and are dropped. Each remaining bin's counts get +0.5,
/// then `g_b`/`b_b` are the bin's shares of negatives/positives and
/// `IV = Σ (g_b − b_b)·ln(g_b/b_b)`.
pub fn information_value(scores: &[f64], labels: &[u8], bins: usize) -> Result<f64> {
    check_inputs(scores, labels)?;
    if bins == 0 {
        return Err(Error::Config("information value needs at least one bin".into()));
    }
    let n = scores.len();
    let order = ascending(scores);
    let mut counts = vec![(0f64, 0f64); bins];
    for g in tie_groups(scores, &order) {
        let bin = g.start * bins / n;
        for &i in &order[g] {
            if labels[i] == 1 {
                counts[bin].1 += 1.0;
            } else {
                counts[bin].0 += 1.0;
            }
        }
    }
    counts.retain(|&(g, b)| g + b > 0.0);
    let smoothed: Vec<(f64, f64)> = counts.iter().map(|&(g, b)| (g + 0.5, b + 0.5)).collect();
    let total_g: f64 = smoothed.iter().map(|c| c.0).sum();
    let total_b: f64 = smoothed.iter().map(|c| c.1).sum();
    Ok(smoothed
        .iter()
        .map(|&(g, b)| {
            let (g, b) = (g / total_g, b / total_b);
            (g - b) * (g / b).ln()
        })
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Records with `score >= threshold` are flagged.
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DollarPrCurve {
    /// One point per distinct score, thresholds descending.
    pub points: Vec<CurvePoint>,
    /// Step-wise area `Σ (R_i − R_{i−1})·P_i`.
    pub auc: f64,
}

/// Dollar-weighted precision/recall sweep over every distinct score.
///
/// Precision is reported as 0 at a threshold whose flagged records carry
/// no dollars at all.
pub fn dollar_pr_curve(scores: &[f64], labels: &[u8], amounts: &[f64]) -> Result<DollarPrCurve> {
    if scores.len() != labels.len() || scores.len() != amounts.len() {
        return Err(Error::Dimension(format!(
            "{} scores, {} labels, {} amounts",
            scores.len(),
            labels.len(),
            amounts.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Data(format!("non-finite score {s}")));
    }
    if let Some(a) = amounts.iter().find(|a| !a.is_finite() || **a < 0.0) {
        return Err(Error::Data(format!("amount {a} must be finite and non-negative")));
    }
    let fraud_total: f64 = amounts.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(a, _)| a).sum();
    if fraud_total <= 0.0 {
        return Err(Error::Data("no fraud dollars: the dollar PR curve is undefined".into()));
    }
    let mut order = ascending(scores);
    order.reverse();
    let (mut flagged, mut fraud) = (0f64, 0f64);
    let mut points = Vec::new();
    let mut auc = 0.0;
    let mut prev_recall = 0.0;
    for g in tie_groups(scores, &order) {
        let threshold = scores[order[g.start]];
        for &i in &order[g] {
            flagged += amounts[i];
            if labels[i] == 1 {
                fraud += amounts[i];
            }
        }
        let precision = if flagged > 0.0 { fraud / flagged } else { 0.0 };
        let recall = fraud / fraud_total;
        auc += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push(CurvePoint { threshold, precision, recall });
    }
    Ok(DollarPrCurve { points, auc })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "target", rename_all = "snake_case")]
pub enum Target {
    RecallAtPrecision(f64),
    PrecisionAtRecall(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub target: f64,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub target_met: bool,
}

fn cmp(a: f64, b: f64) -> Ordering {
    a.total_cmp(&b)
}

/// Lexicographic ranking key of a curve point.
type RankKey = fn(&CurvePoint) -> (f64, f64);

/// Picks a point on the curve for an approximate target.
///
/// Recall-at-precision takes the highest-recall point whose precision
/// reaches the target; when none does, the highest-precision point is
/// returned with `target_met = false`. Precision-at-recall is symmetric.
/// Remaining ties go to the higher threshold.
pub fn operating_point(curve: &DollarPrCurve, target: Target) -> Result<OperatingPoint> {
    if curve.points.is_empty() {
        return Err(Error::Data("empty curve".into()));
    }
    let (goal, key, fallback): (f64, RankKey, RankKey) = match target {
        Target::RecallAtPrecision(p) => (p, |c| (c.recall, c.precision), |c| (c.precision, c.recall)),
        Target::PrecisionAtRecall(r) => (r, |c| (c.precision, c.recall), |c| (c.recall, c.precision)),
    };
    let meets = |c: &CurvePoint| match target {
        Target::RecallAtPrecision(p) => c.precision >= p,
        Target::PrecisionAtRecall(r) => c.recall >= r,
    };
    let better = |f: RankKey| {
        move |a: &&CurvePoint, b: &&CurvePoint| {
            let (a1, a2) = f(a);
            let (b1, b2) = f(b);
            cmp(a1, b1).then(cmp(a2, b2)).then(cmp(a.threshold, b.threshold))
        }
    };
    let (point, met) = match curve.points.iter().filter(|c| meets(c)).max_by(better(key)) {
        Some(p) => (p, true),
        None => (curve.points.iter().max_by(better(fallback)).expect("nonempty"), false),
    };
    Ok(OperatingPoint {
        target: goal,
        threshold: point.threshold,
        precision: point.precision,
        recall: point.recall,
        target_met: met,
    })
}

/// Per-record scores, labels and amounts for `T` tasks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredDataset {
    /// `scores[t][r]`.
    pub scores: Vec<Vec<f64>>,
    /// `labels[t][r]`.
    pub labels: Vec<Vec<u8>>,
    pub amounts: Vec<f64>,
}

impl ScoredDataset {
    pub fn tasks(&self) -> usize {
        self.scores.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub ks: f64,
    pub iv: f64,
    pub dollar_pr_auc: f64,
    pub r_at_p: OperatingPoint,
    pub p_at_r: OperatingPoint,
}

/// Precision target for recall-at-precision.
pub const DEFAULT_PRECISION_TARGET: f64 = 0.25;
/// Recall target for precision-at-recall.
pub const DEFAULT_RECALL_TARGET: f64 = 0.80;
pub const DEFAULT_IV_BINS: usize = 10;

/// Metrics keyed `task1`, `task2`, ...
pub type MetricsReport = BTreeMap<String, TaskMetrics>;

pub fn task_key(t: usize) -> String {
    format!("task{}", t + 1)
}

pub fn evaluate(data: &ScoredDataset) -> Result<MetricsReport> {
    let mut report = MetricsReport::new();
    for t in 0..data.tasks() {
        let (s, l) = (&data.scores[t], &data.labels[t]);
        let curve = dollar_pr_curve(s, l, &data.amounts)?;
        report.insert(
            task_key(t),
            TaskMetrics {
                ks: ks_statistic(s, l)?,
                iv: information_value(s, l, DEFAULT_IV_BINS)?,
                dollar_pr_auc: curve.auc,
                r_at_p: operating_point(&curve, Target::RecallAtPrecision(DEFAULT_PRECISION_TARGET))?,
                p_at_r: operating_point(&curve, Target::PrecisionAtRecall(DEFAULT_RECALL_TARGET))?,
            },
        );
    }
    Ok(report)
}
