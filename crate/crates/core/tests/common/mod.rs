//! Independent reference implementations used by several test targets.

#![allow(dead_code)]

use prognosis_core::cohort::Cohort;
use prognosis_core::pipeline::PreparedSlide;
use prognosis_core::PrognosisLabel;
use rand::Rng;

/// Counts of (bad > good) pairs and tied pairs over all bad/good pairs.
pub fn pairwise_counts(scores: &[(f64, PrognosisLabel)]) -> (u128, u128, u128) {
    let bad: Vec<f64> = scores.iter().filter(|s| s.1.is_bad()).map(|s| s.0).collect();
    let good: Vec<f64> = scores.iter().filter(|s| !s.1.is_bad()).map(|s| s.0).collect();
    let (mut wins, mut ties) = (0u128, 0u128);
    for &b in &bad {
        for &g in &good {
            if b > g {
                wins += 1;
            } else if b == g {
                ties += 1;
            }
        }
    }
    (wins, ties, (bad.len() * good.len()) as u128)
}

/// P(bad > good) + P(tie) / 2, as a float.
pub fn rank_auc(scores: &[(f64, PrognosisLabel)]) -> f64 {
    let (w, t, pairs) = pairwise_counts(scores);
    (2 * w + t) as f64 / (2 * pairs) as f64
}

/// O(n log n) rank statistic via average ranks, for large instances.
pub fn mann_whitney_auc(scores: &[(f64, PrognosisLabel)]) -> f64 {
    let mut sorted: Vec<(f64, bool)> = scores.iter().map(|s| (s.0, s.1.is_bad())).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        rank_sum += avg * sorted[i..j].iter().filter(|s| s.1).count() as f64;
        i = j;
    }
    let p = sorted.iter().filter(|s| s.1).count() as f64;
    let n = sorted.len() as f64 - p;
    (rank_sum - p * (p + 1.0) / 2.0) / (p * n)
}

/// Candidate thresholds: one above every score, the midpoint between each
/// pair of neighbouring distinct scores, and one below every score.
pub fn candidate_thresholds(scores: &[(f64, PrognosisLabel)]) -> Vec<f64> {
    let mut v: Vec<f64> = scores.iter().map(|s| s.0).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    let mut out = vec![v[0] - 1.0];
    out.extend(v.windows(2).map(|w| (w[1] + w[0]) / 2.0));
    out.push(v[v.len() - 1] + 1.0);
    out
}

/// Exhaustive maximizer of sensitivity + specificity, ties to the smallest
/// threshold. Compared as exact fractions over P*N.
pub fn brute_threshold(scores: &[(f64, PrognosisLabel)]) -> f64 {
    let p = scores.iter().filter(|s| s.1.is_bad()).count() as i128;
    let n = scores.len() as i128 - p;
    let mut best: Option<(i128, f64)> = None;
    for t in candidate_thresholds(scores) {
        let tp = scores.iter().filter(|s| s.1.is_bad() && s.0 > t).count() as i128;
        let tn = scores.iter().filter(|s| !s.1.is_bad() && s.0 <= t).count() as i128;
        let j = tp * n + tn * p;
        if best.is_none_or(|(bj, _)| j > bj) {
            best = Some((j, t));
        }
    }
    best.unwrap().1
}

pub fn random_scores(rng: &mut impl Rng, len: usize, levels: u32) -> Vec<(f64, PrognosisLabel)> {
    let mut v: Vec<(f64, PrognosisLabel)> = (0..len)
        .map(|_| {
            let s = f64::from(rng.random_range(0..levels)) / f64::from(levels.max(2) - 1);
            let l = if rng.random_bool(0.5) {
                PrognosisLabel::Bad
            } else {
                PrognosisLabel::Good
            };
            (s, l)
        })
        .collect();
    v[0].1 = PrognosisLabel::Good;
    v[len - 1].1 = PrognosisLabel::Bad;
    v
}

/// Per-dimension |mean_good - mean_bad| / pooled within-class SD.
pub fn separation(prepared: &[PreparedSlide]) -> Vec<f64> {
    let dim = prepared.iter().find(|s| !s.features.is_empty()).unwrap().features[0].len();
    let mut sum = [vec![0f64; dim], vec![0f64; dim]];
    let mut sq = [vec![0f64; dim], vec![0f64; dim]];
    let mut n = [0f64; 2];
    for s in prepared {
        let c = s.label.index();
        for f in &s.features {
            n[c] += 1.0;
            for (j, &x) in f.iter().enumerate() {
                sum[c][j] += f64::from(x);
                sq[c][j] += f64::from(x).powi(2);
            }
        }
    }
    (0..dim)
        .map(|j| {
            let m = [sum[0][j] / n[0], sum[1][j] / n[1]];
            let ss = [sq[0][j] - n[0] * m[0] * m[0], sq[1][j] - n[1] * m[1] * m[1]];
            let pooled = ((ss[0] + ss[1]) / (n[0] + n[1] - 2.0)).sqrt();
            (m[0] - m[1]).abs() / pooled
        })
        .collect()
}

/// Labels of `shuffled` applied to already prepared slides.
pub fn relabel(prepared: &[PreparedSlide], shuffled: &Cohort) -> Vec<PreparedSlide> {
    let labels: std::collections::BTreeMap<String, PrognosisLabel> = shuffled.patients().into_iter().collect();
    prepared.iter().map(|s| s.with_label(labels[&s.slide_id])).collect()
}
