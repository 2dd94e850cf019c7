//! Acceptance criteria. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails. The end-to-end runs train full-width classifiers on a
//! 52-slide cohort and take several minutes.

mod common;

use std::time::{Duration, Instant};

use common::{brute_threshold, mann_whitney_auc, pairwise_counts, random_scores, relabel};
use ndarray::Array2;
use prognosis_core::classifier::{backward, cross_entropy, forward_batch, ClassifierParams, Mode};
use prognosis_core::cohort::{Cohort, SyntheticCohortSpec};
use prognosis_core::evaluation::{auc, confusion_metrics, roc_curve, run_prepared, select_threshold, CvReport};
use prognosis_core::masking::BinaryMask;
use prognosis_core::patching::{extract_valid_coordinates, sample_coordinates, scale_center};
use prognosis_core::pipeline::{prepare_cohort, FeatureKind, FeatureSource, PipelineConfig, PreparedSlide};
use prognosis_core::{seeds, Magnification, PrognosisLabel};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const COHORT_SEED: u64 = 7;
const PIPELINE_SEED: u64 = 7;
const SHUFFLE_SEED: u64 = 99;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn timed(id: u32, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    run(id, limit, true, f)
}

fn run(id: u32, limit: Option<Duration>, print: bool, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = f();
    let elapsed = start.elapsed();
    let in_time = limit.is_none_or(|l| elapsed < l);
    let pass = o.pass && in_time;
    if !print {
        return pass;
    }
    let limit_text = limit.map(|l| format!(" (limit {:.0?})", l)).unwrap_or_default();
    println!(
        "criterion {id:>2}: {} {} [{:.2?}{limit_text}]",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed
    );
    pass
}

fn labels_from_counts(tp: usize, fn_: usize, tn: usize, fp: usize) -> (Vec<PrognosisLabel>, Vec<PrognosisLabel>) {
    use PrognosisLabel::{Bad, Good};
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for (n, p, t) in [(tp, Bad, Bad), (fn_, Good, Bad), (tn, Good, Good), (fp, Bad, Good)] {
        pred.extend(std::iter::repeat_n(p, n));
        truth.extend(std::iter::repeat_n(t, n));
    }
    (pred, truth)
}

fn metric_formulas() -> Outcome {
    let target = [0.8846, 0.5600, 0.7667, 0.7255];
    let close = |v: [f64; 4]| v.iter().zip(&target).all(|(a, b)| (a - b).abs() <= 0.00005);
    // Every confusion matrix over at most 60 patients that reproduces the row.
    let mut found = Vec::new();
    for p in 1..=60usize {
        for n in 1..=(60 - p) {
            for tp in 0..=p {
                for tn in 0..=n {
                    let (fn_, fp) = (p - tp, n - tn);
                    let v = [
                        tp as f64 / p as f64,
                        tn as f64 / n as f64,
                        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64,
                        (tp + tn) as f64 / (p + n) as f64,
                    ];
                    if close(v) {
                        found.push((tp, fn_, tn, fp));
                    }
                }
            }
        }
    }
    let (pred, truth) = labels_from_counts(23, 3, 14, 11);
    let (c, m) = confusion_metrics(&pred, &truth).unwrap();
    let got = [m.sensitivity, m.specificity, m.f1, m.accuracy];
    outcome(
        close(got) && (c.tp, c.fn_, c.tn, c.fp) == (23, 3, 14, 11) && found == vec![(23, 3, 14, 11)],
        format!(
            "sens {:.4} spec {:.4} F1 {:.4} acc {:.4}; matching matrices {found:?}",
            got[0], got[1], got[2], got[3]
        ),
    )
}

fn gradient_check() -> Outcome {
    let params = ClassifierParams::<f64>::init(8, 16, 1);
    let mut rng = seeds::rng(2, &[]);
    let x = Array2::from_shape_fn((10, 8), |_| StandardNormal.sample(&mut rng));
    let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
    let loss = |p: &ClassifierParams<f64>| {
        let mut r = seeds::rng(0, &[]);
        cross_entropy(&forward_batch(p, x.view(), Mode::Eval, 0.0, &mut r).unwrap(), &labels)
    };
    let mut r = seeds::rng(0, &[]);
    let grads = backward(
        &params,
        &forward_batch(&params, x.view(), Mode::Eval, 0.0, &mut r).unwrap(),
        &labels,
    );
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for t in 0..6 {
        for i in 0..params.slices()[t].len() {
            let mut plus = params.clone();
            plus.slices_mut()[t][i] += h;
            let mut minus = params.clone();
            minus.slices_mut()[t][i] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let analytic = grads.slices()[t][i];
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8));
        }
    }
    outcome(
        worst < 1e-4,
        format!("{} parameters, max relative error {worst:.2e}", params.num_parameters()),
    )
}

/// Calls `visit` with every multiset of `size` items drawn from `kinds` kinds.
fn multisets(kinds: usize, size: usize, counts: &mut Vec<usize>, visit: &mut impl FnMut(&[usize])) {
    if counts.len() == kinds - 1 {
        counts.push(size);
        visit(counts);
        counts.pop();
        return;
    }
    for c in 0..=size {
        counts.push(c);
        multisets(kinds, size - c, counts, visit);
        counts.pop();
    }
}

fn auc_oracle() -> Outcome {
    const GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
    let kinds: Vec<(f64, PrognosisLabel)> = GRID
        .iter()
        .flat_map(|&s| [(s, PrognosisLabel::Good), (s, PrognosisLabel::Bad)])
        .collect();
    let (mut checked, mut mismatches) = (0usize, 0usize);
    for size in 2..=12 {
        multisets(kinds.len(), size, &mut Vec::new(), &mut |counts| {
            let scores: Vec<(f64, PrognosisLabel)> = counts
                .iter()
                .zip(&kinds)
                .flat_map(|(&c, &k)| std::iter::repeat_n(k, c))
                .collect();
            let bad = scores.iter().filter(|s| s.1.is_bad()).count();
            if bad == 0 || bad == scores.len() {
                return;
            }
            let (w, t, pairs) = pairwise_counts(&scores);
            let exact = (2 * w + t) as f64 / (2 * pairs) as f64;
            checked += 1;
            if auc(&roc_curve(&scores).unwrap()) != exact {
                mismatches += 1;
            }
        });
    }
    let mut rng = seeds::rng(3, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let mut scores = random_scores(&mut rng, 1000, 2);
        for s in &mut scores {
            s.0 = rng.random::<f64>();
        }
        worst = worst.max((auc(&roc_curve(&scores).unwrap()) - mann_whitney_auc(&scores)).abs());
    }
    outcome(
        mismatches == 0 && worst <= 1e-12,
        format!("{checked} exhaustive multisets, {mismatches} mismatches; random max error {worst:.1e}"),
    )
}

fn threshold_oracle() -> Outcome {
    let mut rng = seeds::rng(4, &[]);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let len = rng.random_range(2..60);
        let levels = rng.random_range(2..12);
        let scores = random_scores(&mut rng, len, levels);
        if select_threshold(&roc_curve(&scores).unwrap()) != brute_threshold(&scores) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("1000 instances, {mismatches} mismatches"))
}

fn projection() -> Outcome {
    let mut rng = seeds::rng(5, &[]);
    let mut worst = 0i64;
    for _ in 0..10_000 {
        let c = (rng.random_range(0..500_000i64), rng.random_range(0..500_000i64));
        for m in [Magnification::X10, Magnification::X40] {
            let (mx, my) = scale_center(c, m);
            let back = |v: i64| (v as f64 * 20.0 / m.value()).round() as i64;
            worst = worst.max((back(mx) - c.0).abs()).max((back(my) - c.1).abs());
        }
    }
    let areas_exact = [Magnification::X10, Magnification::X40].iter().all(|&m| {
        let (num, den) = m.ratio_to_20x();
        let side_20x = 224.0 * den as f64 / num as f64;
        side_20x * side_20x / (224.0 * 224.0) == (20.0 / m.value()).powi(2)
    });
    outcome(
        worst <= 1 && areas_exact,
        format!("max back-projection error {worst} px, area ratios exact: {areas_exact}"),
    )
}

fn patch_counts() -> (Outcome, String) {
    let mask = BinaryMask::filled("grid", 8 * 28, 8 * 28, true);
    let coords = extract_valid_coordinates(&mask, PrognosisLabel::Bad, 224, 0.7).unwrap();
    let candidates: Vec<u32> = (0..1000).collect();
    let a = sample_coordinates(&candidates, 250, 11).unwrap();
    let b = sample_coordinates(&candidates, 250, 11).unwrap();
    let artifact = serde_json::to_string(&(coords.len(), &a)).unwrap();
    (
        outcome(
            coords.len() == 64 && a.len() == 250 && a == b,
            format!(
                "{} coordinates on 8x8 footprints, {} of 1000 sampled, repeatable: {}",
                coords.len(),
                a.len(),
                a == b
            ),
        ),
        artifact,
    )
}

fn mono_config() -> PipelineConfig {
    PipelineConfig::new(&[Magnification::X20], PIPELINE_SEED)
}

fn cohort() -> Cohort {
    Cohort::synthetic(&SyntheticCohortSpec::new(26, 26, COHORT_SEED))
}

fn report_json(r: &CvReport) -> String {
    serde_json::to_string_pretty(r).unwrap()
}

fn planted_signal() -> (Outcome, Vec<PreparedSlide>, String) {
    let cfg = mono_config();
    let prepared = prepare_cohort(&cohort(), &cfg, &FeatureSource::Reference).unwrap();
    let r = run_prepared(&prepared, &cfg, FeatureKind::Reference, Vec::new()).unwrap();
    let m = &r.mean;
    let o = outcome(
        r.folds.len() == 5 && m.auc >= 0.90 && m.sensitivity >= m.specificity,
        format!(
            "MONO-20, 5 folds: mean AUC {:.4}, sensitivity {:.4}, specificity {:.4}, F1 {:.4}, accuracy {:.4}",
            m.auc, m.sensitivity, m.specificity, m.f1, m.accuracy
        ),
    );
    (o, prepared, report_json(&r))
}

fn null_run(prepared: &[PreparedSlide]) -> (Outcome, String) {
    let shuffled = relabel(prepared, &cohort().with_shuffled_labels(SHUFFLE_SEED));
    let r = run_prepared(&shuffled, &mono_config(), FeatureKind::Reference, Vec::new()).unwrap();
    let o = outcome(
        (0.35..=0.65).contains(&r.mean.auc),
        format!("shuffled labels: mean AUC {:.4}", r.mean.auc),
    );
    (o, report_json(&r))
}

fn multi_scale() -> (Outcome, Vec<String>) {
    use Magnification::{X10, X20, X40};
    let tri = PipelineConfig::new(&[X10, X20, X40], PIPELINE_SEED);
    let prepared = prepare_cohort(&cohort(), &tri, &FeatureSource::Reference).unwrap();
    let mut details = Vec::new();
    let mut reports = Vec::new();
    let mut pass = true;
    for (name, mags, dim) in [("DI", vec![X20, X40], 1024), ("TRI", vec![X10, X20, X40], 1536)] {
        let cfg = PipelineConfig::new(&mags, PIPELINE_SEED);
        let slides: Vec<PreparedSlide> = prepared
            .iter()
            .map(|s| s.restrict(&tri.magnifications, &mags).unwrap())
            .collect();
        let widths_ok = slides.iter().flat_map(|s| &s.features).all(|f| f.len() == dim);
        match run_prepared(&slides, &cfg, FeatureKind::Reference, Vec::new()) {
            Ok(r) => {
                pass &= widths_ok && r.input_dim == dim && r.folds.len() == 5;
                details.push(format!("{name} input_dim {} mean AUC {:.4}", r.input_dim, r.mean.auc));
                reports.push(report_json(&r));
            }
            Err(e) => {
                pass = false;
                details.push(format!("{name} failed: {e}"));
            }
        }
    }
    (outcome(pass, details.join("; ")), reports)
}

/// Artifacts of criteria 6 to 9, in order.
fn deterministic_artifacts(results: &mut Vec<bool>, print: bool) -> Vec<String> {
    let mut artifacts = Vec::new();
    let (o, a) = patch_counts();
    results.push(run(6, None, print, || o));
    artifacts.push(a);

    let mut prepared = Vec::new();
    results.push(run(7, Some(Duration::from_secs(600)), print, || {
        let (o, p, a) = planted_signal();
        prepared = p;
        artifacts.push(a);
        o
    }));
    results.push(run(8, None, print, || {
        let (o, a) = null_run(&prepared);
        artifacts.push(a);
        o
    }));
    results.push(run(9, None, print, || {
        let (o, a) = multi_scale();
        artifacts.extend(a);
        o
    }));
    artifacts
}

#[test]
fn acceptance() {
    let mut results = vec![
        timed(1, Some(Duration::from_secs(1)), metric_formulas),
        timed(2, Some(Duration::from_secs(10)), gradient_check),
        timed(3, Some(Duration::from_secs(60)), auc_oracle),
        timed(4, Some(Duration::from_secs(10)), threshold_oracle),
        timed(5, Some(Duration::from_secs(5)), projection),
    ];
    let first = deterministic_artifacts(&mut results, true);
    let mut rerun = Vec::new();
    let second = deterministic_artifacts(&mut rerun, false);
    results.push(timed(10, None, || {
        let same = first.len() == second.len() && first.iter().zip(&second).all(|(a, b)| a == b);
        outcome(
            same && rerun.iter().all(|&p| p),
            format!(
                "{} reports compared after rerunning criteria 6-9, byte-identical: {same}",
                first.len()
            ),
        )
    }));
    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, &p)| !p)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
