//! ROC analysis, TPR-targeted threshold selection, and classification.
//!
//! Defective is the positive class everywhere: an item is flagged when its
//! anomaly score is at or above the threshold.

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub id: String,
    pub camera: u32,
    pub score: f64,
    pub label: Label,
}

impl ScoredItem {
    pub fn new(id: impl Into<String>, camera: u32, score: f64, label: Label) -> Self {
        Self {
            id: id.into(),
            camera,
            score,
            label,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyThreshold {
    pub value: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub target_tpr: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub roc: Vec<RocPoint>,
    pub auroc: f64,
    pub threshold: AnomalyThreshold,
    pub accuracy: f64,
    pub confusion: Confusion,
}

/// Item counts at each candidate threshold, highest threshold first. The
/// first row is the sentinel `max + 1` that flags nothing.
struct Sweep {
    positives: usize,
    negatives: usize,
    /// `(threshold, tp, fp)` for "flag iff score >= threshold".
    rows: Vec<(f64, usize, usize)>,
}

fn sweep(items: &[ScoredItem]) -> Result<Sweep> {
    if let Some(bad) = items.iter().find(|i| !i.score.is_finite()) {
        return Err(Error::Num(format!("score of {} is not finite", bad.id)));
    }
    let positives = items.iter().filter(|i| i.label.is_defective()).count();
    let negatives = items.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Degenerate(format!(
            "need both labels, got {positives} defective and {negatives} good"
        )));
    }
    let mut sorted: Vec<(f64, bool)> = items.iter().map(|i| (i.score, i.label.is_defective())).collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut rows = vec![(sorted[0].0 + 1.0, 0, 0)];
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        rows.push((t, tp, fp));
    }
    Ok(Sweep {
        positives,
        negatives,
        rows,
    })
}

/// Cumulative `(FPR, TPR)` from the sentinel threshold down to the minimum
/// score. Tied scores share one point.
pub fn roc_points(items: &[ScoredItem]) -> Result<Vec<RocPoint>> {
    let s = sweep(items)?;
    Ok(s.rows
        .iter()
        .map(|&(threshold, tp, fp)| RocPoint {
            fpr: fp as f64 / s.negatives as f64,
            tpr: tp as f64 / s.positives as f64,
            threshold,
        })
        .collect())
}

/// Trapezoidal area under [`roc_points`].
pub fn auroc(items: &[ScoredItem]) -> Result<f64> {
    let roc = roc_points(items)?;
    Ok(roc
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum())
}

/// Among candidate thresholds with TPR ≥ `target_tpr`, the one with the
/// smallest FPR; ties go to the largest threshold.
pub fn select_threshold(items: &[ScoredItem], target_tpr: f64) -> Result<AnomalyThreshold> {
    if !(target_tpr > 0.0 && target_tpr <= 1.0) {
        return Err(Error::Arg(format!("target TPR {target_tpr} outside (0, 1]")));
    }
    let s = sweep(items)?;
    let mut best: Option<AnomalyThreshold> = None;
    // rows run from high to low threshold, so the first minimum wins ties
    for &(value, tp, fp) in &s.rows {
        let tpr = tp as f64 / s.positives as f64;
        if !meets_target(tpr, target_tpr) {
            continue;
        }
        let fpr = fp as f64 / s.negatives as f64;
        if best.is_none_or(|b| fpr < b.fpr) {
            best = Some(AnomalyThreshold {
                value,
                tpr,
                fpr,
                target_tpr,
            });
        }
    }
    best.ok_or_else(|| Error::Degenerate("no threshold reaches the target TPR".into()))
}

/// `tpr >= target` up to rounding in the rate division.
pub fn meets_target(tpr: f64, target: f64) -> bool {
    tpr >= target - 1e-12
}

/// Good iff the score is strictly below the threshold.
pub fn classify(score: f64, threshold: f64) -> Label {
    if score < threshold {
        Label::Good
    } else {
        Label::Defective
    }
}

pub fn accuracy(predictions: &[Label], labels: &[Label]) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::Arg(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

pub fn confusion(predictions: &[Label], labels: &[Label]) -> Confusion {
    let mut c = Confusion::default();
    for (p, l) in predictions.iter().zip(labels) {
        match (p.is_defective(), l.is_defective()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// A product is defective if any camera flags it.
pub fn aggregate_cameras(decisions: &[Label]) -> Result<Label> {
    if decisions.is_empty() {
        return Err(Error::Arg("no camera decisions to aggregate".into()));
    }
    Ok(if decisions.iter().any(|d| d.is_defective()) {
        Label::Defective
    } else {
        Label::Good
    })
}

/// Scores `items` against a threshold chosen elsewhere (normally on the
/// validation split).
pub fn evaluate(items: &[ScoredItem], threshold: AnomalyThreshold) -> Result<EvalReport> {
    let roc = roc_points(items)?;
    let auroc = auroc(items)?;
    let preds: Vec<Label> = items.iter().map(|i| classify(i.score, threshold.value)).collect();
    let labels: Vec<Label> = items.iter().map(|i| i.label).collect();
    Ok(EvalReport {
        roc,
        auroc,
        threshold,
        accuracy: accuracy(&preds, &labels)?,
        confusion: confusion(&preds, &labels),
    })
}

pub fn roc_csv(roc: &[RocPoint]) -> String {
    let mut s = String::from("fpr,tpr,threshold\n");
    for p in roc {
        s.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
    }
    s
}

pub fn scores_jsonl(items: &[ScoredItem]) -> String {
    let mut s = String::new();
    for i in items {
        s.push_str(&serde_json::to_string(i).expect("scored items serialize"));
        s.push('\n');
    }
    s
}
