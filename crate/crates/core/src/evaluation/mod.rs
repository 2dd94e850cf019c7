//! Patient-level scoring, ROC analysis, threshold selection and confusion metrics.

mod cv;
mod report;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::PrognosisLabel;

pub use cv::{
    assemble_report, evaluate_fold, fold_slides, fold_train_config, make_folds, patient_scores, run_cross_validation,
    run_prepared, train_fold, CvReport, FoldReport, MeanReport,
};
pub use report::{render_roc_svg, roc_csv_name, write_report, REPORT_CSV, REPORT_JSON, ROC_SVG};

/// Fraction of a patient's patches predicted bad.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientScore {
    pub slide_id: String,
    pub score: f64,
    pub n_patches: usize,
    pub bad_patches: usize,
    pub label: PrognosisLabel,
}

pub fn aggregate_patient(slide_id: &str, label: PrognosisLabel, predictions: &[u8]) -> Result<PatientScore> {
    if predictions.is_empty() {
        return Err(Error::NoPatches(slide_id.to_string()));
    }
    if let Some(v) = predictions.iter().find(|&&p| p > 1) {
        return Err(Error::invalid(format!("patch prediction {v} is not 0 or 1")));
    }
    let bad = predictions.iter().filter(|&&p| p == 1).count();
    Ok(PatientScore {
        slide_id: slide_id.to_string(),
        score: bad as f64 / predictions.len() as f64,
        n_patches: predictions.len(),
        bad_patches: bad,
        label,
    })
}

/// Bad prognosis iff the score is strictly above the threshold.
pub fn classify(score: f64, threshold: f64) -> PrognosisLabel {
    if score > threshold {
        PrognosisLabel::Bad
    } else {
        PrognosisLabel::Good
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
    pub false_positives: usize,
    pub true_positives: usize,
}

/// ROC curve with bad prognosis as the positive class, ordered by
/// decreasing threshold from (0, 0) to (1, 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub positives: usize,
    pub negatives: usize,
}

/// Distance of the sentinel thresholds beyond the extreme scores.
pub const SENTINEL_OFFSET: f64 = 1.0;

/// Sweeps thresholds over a sentinel above the maximum, the midpoints of
/// consecutive distinct scores and a sentinel below the minimum.
pub fn roc_curve(scores: &[(f64, PrognosisLabel)]) -> Result<RocCurve> {
    if let Some((s, _)) = scores.iter().find(|(s, _)| !s.is_finite()) {
        return Err(Error::invalid(format!("non-finite score {s}")));
    }
    let positives = scores.iter().filter(|(_, l)| l.is_bad()).count();
    let negatives = scores.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass { positives, negatives });
    }
    let mut sorted: Vec<(f64, PrognosisLabel)> = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let point = |tp: usize, fp: usize, threshold: f64| RocPoint {
        fpr: fp as f64 / negatives as f64,
        tpr: tp as f64 / positives as f64,
        threshold,
        false_positives: fp,
        true_positives: tp,
    };
    let mut points = vec![point(0, 0, sorted[0].0 + SENTINEL_OFFSET)];
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < sorted.len() {
        let value = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == value {
            if sorted[i].1.is_bad() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let threshold = match sorted.get(i) {
            Some(&(next, _)) => (value + next) / 2.0,
            None => value - SENTINEL_OFFSET,
        };
        points.push(point(tp, fp, threshold));
    }
    Ok(RocCurve {
        points,
        positives,
        negatives,
    })
}

/// Trapezoidal area under the curve, evaluated in exact integer arithmetic
/// so it coincides with the rank statistic P(bad > good) + P(tie)/2.
pub fn auc(curve: &RocCurve) -> f64 {
    let twice_area: u128 = curve
        .points
        .windows(2)
        .map(|w| {
            let dfp = (w[1].false_positives - w[0].false_positives) as u128;
            dfp * (w[1].true_positives + w[0].true_positives) as u128
        })
        .sum();
    twice_area as f64 / (2 * curve.positives as u128 * curve.negatives as u128) as f64
}

/// Threshold maximizing sensitivity + specificity; among equal maxima the
/// smallest threshold wins.
pub fn select_threshold(curve: &RocCurve) -> f64 {
    select_point(curve).threshold
}

/// The curve point chosen by [`select_threshold`].
pub fn select_point(curve: &RocCurve) -> &RocPoint {
    // tpr - fpr scaled by P*N, exact in integers.
    let objective =
        |p: &RocPoint| (p.true_positives * curve.negatives) as i128 - (p.false_positives * curve.positives) as i128;
    let mut best = &curve.points[0];
    for p in &curve.points[1..] {
        // Points come in decreasing threshold order, so `>=` keeps the smallest.
        if objective(p) >= objective(best) {
            best = p;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub accuracy: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn metrics(&self) -> Metrics {
        Metrics {
            sensitivity: ratio(self.tp, self.tp + self.fn_),
            specificity: ratio(self.tn, self.tn + self.fp),
            f1: ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_),
            accuracy: ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_),
        }
    }
}

pub fn confusion_counts(predictions: &[PrognosisLabel], labels: &[PrognosisLabel]) -> Result<Confusion> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} predictions", labels.len()),
            actual: predictions.len().to_string(),
        });
    }
    let mut c = Confusion {
        tp: 0,
        fn_: 0,
        tn: 0,
        fp: 0,
    };
    for (p, l) in predictions.iter().zip(labels) {
        match (l.is_bad(), p.is_bad()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fp += 1,
        }
    }
    if c.tp + c.fn_ == 0 || c.tn + c.fp == 0 {
        return Err(Error::SingleClass {
            positives: c.tp + c.fn_,
            negatives: c.tn + c.fp,
        });
    }
    Ok(c)
}

pub fn confusion_metrics(predictions: &[PrognosisLabel], labels: &[PrognosisLabel]) -> Result<(Confusion, Metrics)> {
    let c = confusion_counts(predictions, labels)?;
    Ok((c, c.metrics()))
}
