mod common;

use common::{brute_threshold, candidate_thresholds, random_scores, rank_auc};
use prognosis_core::evaluation::{auc, classify, roc_curve, select_point, select_threshold};
use prognosis_core::{seeds, PrognosisLabel};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn label(bad: bool) -> PrognosisLabel {
    if bad {
        PrognosisLabel::Bad
    } else {
        PrognosisLabel::Good
    }
}

fn both_classes() -> impl Strategy<Value = Vec<(f64, PrognosisLabel)>> {
    prop::collection::vec((0u8..20, any::<bool>()), 2..40).prop_map(|v| {
        let mut s: Vec<(f64, PrognosisLabel)> = v.into_iter().map(|(x, b)| (f64::from(x) / 19.0, label(b))).collect();
        s[0].1 = PrognosisLabel::Good;
        s[1].1 = PrognosisLabel::Bad;
        s
    })
}

proptest! {
    #[test]
    fn auc_is_the_rank_statistic(scores in both_classes()) {
        prop_assert_eq!(auc(&roc_curve(&scores).unwrap()), rank_auc(&scores));
    }

    #[test]
    fn threshold_matches_exhaustive_search(scores in both_classes()) {
        prop_assert_eq!(select_threshold(&roc_curve(&scores).unwrap()), brute_threshold(&scores));
    }

    #[test]
    fn monotone_transform_keeps_auc_and_operating_point(scores in both_classes()) {
        let moved: Vec<_> = scores.iter().map(|&(s, l)| (3.0 * s + 1.0, l)).collect();
        let (a, b) = (roc_curve(&scores).unwrap(), roc_curve(&moved).unwrap());
        prop_assert_eq!(auc(&a), auc(&b));
        let (pa, pb) = (select_point(&a), select_point(&b));
        prop_assert_eq!((pa.true_positives, pa.false_positives), (pb.true_positives, pb.false_positives));
    }

    #[test]
    fn curve_is_monotone_from_origin_to_corner(scores in both_classes()) {
        let c = roc_curve(&scores).unwrap();
        let first = &c.points[0];
        let last = c.points.last().unwrap();
        prop_assert_eq!((first.fpr, first.tpr, last.fpr, last.tpr), (0.0, 0.0, 1.0, 1.0));
        for w in c.points.windows(2) {
            prop_assert!(w[0].threshold > w[1].threshold);
            prop_assert!(w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr);
        }
    }
}

#[test]
fn curve_points_match_direct_counts() {
    let mut rng = seeds::rng(21, &[]);
    for _ in 0..50 {
        let scores = random_scores(&mut rng, 20, 8);
        let curve = roc_curve(&scores).unwrap();
        let mut expected: Vec<f64> = candidate_thresholds(&scores);
        expected.reverse();
        let got: Vec<f64> = curve.points.iter().map(|p| p.threshold).collect();
        assert_eq!(got, expected);
        for p in &curve.points {
            let tp = scores
                .iter()
                .filter(|s| s.1.is_bad() && classify(s.0, p.threshold).is_bad())
                .count();
            let fp = scores
                .iter()
                .filter(|s| !s.1.is_bad() && classify(s.0, p.threshold).is_bad())
                .count();
            assert_eq!((p.true_positives, p.false_positives), (tp, fp));
        }
    }
}

#[test]
fn shuffled_labels_average_to_chance() {
    let mut rng = seeds::rng(5, &[]);
    let scores: Vec<f64> = (0..40).map(|_| rng.random::<f64>()).collect();
    let mut labels: Vec<PrognosisLabel> = (0..40).map(|i| label(i % 2 == 0)).collect();
    let runs = 2000;
    let mut total = 0.0;
    for _ in 0..runs {
        labels.shuffle(&mut rng);
        let pairs: Vec<_> = scores.iter().copied().zip(labels.iter().copied()).collect();
        total += auc(&roc_curve(&pairs).unwrap());
    }
    let mean = total / f64::from(runs);
    assert!((mean - 0.5).abs() < 0.05, "{mean}");
}
