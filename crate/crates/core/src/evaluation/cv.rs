//! Stratified k-fold cross-validation harness.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{
    aggregate_patient, auc, classify, confusion_metrics, roc_curve, select_threshold, Confusion, PatientScore, RocCurve,
};
use crate::classifier::{
    init_classifier_with_hidden, predict_labels, train, ClassifierParams, EpochAugmenter, LabeledFeatures, TrainConfig,
    TrainHistory,
};
use crate::cohort::Cohort;
use crate::embedding::{Embedder, PixelAugmenter};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::patching::{stratified_kfold, Fold};
use crate::pipeline::{prepare_cohort, FeatureKind, FeatureSource, PipelineConfig, PreparedSlide};
use crate::pyramid::PrognosisLabel;
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    /// 1-based fold index.
    pub fold: usize,
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub auc: f64,
    pub confusion: Confusion,
    pub train_slides: usize,
    pub validation_slides: usize,
    pub train_patches: usize,
    pub validation_patches: usize,
    pub history: TrainHistory,
    pub validation_scores: Vec<PatientScore>,
    pub roc: RocCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanReport {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub auc: f64,
}

impl MeanReport {
    pub fn of(folds: &[FoldReport]) -> Self {
        let n = folds.len() as f64;
        let mean = |f: fn(&FoldReport) -> f64| folds.iter().map(f).sum::<f64>() / n;
        MeanReport {
            threshold: mean(|r| r.threshold),
            sensitivity: mean(|r| r.sensitivity),
            specificity: mean(|r| r.specificity),
            f1: mean(|r| r.f1),
            accuracy: mean(|r| r.accuracy),
            auc: mean(|r| r.auc),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub config: PipelineConfig,
    pub input_dim: usize,
    pub features: FeatureKind,
    pub augmentation: bool,
    pub notes: Vec<String>,
    pub warnings: Vec<String>,
    pub folds: Vec<FoldReport>,
    pub mean: MeanReport,
}

fn select<'a>(by_id: &BTreeMap<&str, &'a PreparedSlide>, ids: &[String]) -> Result<Vec<&'a PreparedSlide>> {
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::invalid(format!("fold references unknown slide {id}")))
        })
        .collect()
}

/// Training and validation slides of a fold, in fold order.
pub fn fold_slides<'a>(
    prepared: &'a [PreparedSlide],
    fold: &Fold,
) -> Result<(Vec<&'a PreparedSlide>, Vec<&'a PreparedSlide>)> {
    let by_id: BTreeMap<&str, &PreparedSlide> = prepared.iter().map(|s| (s.slide_id.as_str(), s)).collect();
    Ok((select(&by_id, &fold.train)?, select(&by_id, &fold.validation)?))
}

fn labeled(slides: &[&PreparedSlide]) -> Result<LabeledFeatures> {
    let rows: Vec<Vec<f32>> = slides.iter().flat_map(|s| s.features.iter().cloned()).collect();
    let labels: Vec<PrognosisLabel> = slides.iter().flat_map(|s| s.coords.iter().map(|c| c.label)).collect();
    LabeledFeatures::from_rows(&rows, &labels)
}

/// Splits the prepared cohort into folds.
pub fn make_folds(prepared: &[PreparedSlide], cfg: &PipelineConfig) -> Result<Vec<Fold>> {
    let patients: Vec<(String, PrognosisLabel)> = prepared.iter().map(|s| (s.slide_id.clone(), s.label)).collect();
    stratified_kfold(&patients, cfg.folds, cfg.seeds.split)
}

/// Training configuration of fold `fold_index`, with its own shuffling and dropout seed.
pub fn fold_train_config(cfg: &PipelineConfig, fold_index: usize) -> TrainConfig {
    TrainConfig {
        seed: seeds::derive(cfg.seeds.training, &[fold_index as u64]),
        ..cfg.train.clone()
    }
}

/// Trains the classifier of one fold (`fold_index` is 1-based).
pub fn train_fold(
    prepared: &[PreparedSlide],
    fold: &Fold,
    fold_index: usize,
    cfg: &PipelineConfig,
) -> Result<(ClassifierParams, TrainHistory)> {
    let (train_slides, val_slides) = fold_slides(prepared, fold)?;
    let train_set = labeled(&train_slides)?;
    let val_set = labeled(&val_slides)?;
    let tc = fold_train_config(cfg, fold_index);
    let params = init_classifier_with_hidden(
        cfg.magnifications.len(),
        tc.hidden_units,
        seeds::derive(cfg.seeds.training, &[seeds::TAG_INIT, fold_index as u64]),
    )?;

    let bank = cfg.embedders()?;
    let embedders: Vec<&dyn Embedder> = bank.iter().map(|e| e as &dyn Embedder).collect();
    let pixels: Option<Vec<&[image::RgbImage]>> = train_slides
        .iter()
        .map(|s| {
            s.rasters
                .as_ref()
                .map(|r| r.iter().map(Vec::as_slice).collect::<Vec<_>>())
        })
        .collect::<Option<Vec<_>>>()
        .map(|v| v.into_iter().flatten().collect());
    let augmenter = match pixels {
        Some(p) if tc.augmentation_enabled => Some(PixelAugmenter::new(
            p,
            embedders,
            seeds::derive(cfg.seeds.training, &[seeds::TAG_AUGMENT, fold_index as u64]),
            Parallelism::Sequential,
        )?),
        _ => None,
    };
    train(
        params,
        &train_set,
        &val_set,
        &tc,
        augmenter.as_ref().map(|a| a as &dyn EpochAugmenter),
    )
}

/// Patient scores of every slide that has at least one patch.
pub fn patient_scores(params: &ClassifierParams, slides: &[&PreparedSlide]) -> Result<Vec<PatientScore>> {
    slides
        .iter()
        .filter(|s| !s.features.is_empty())
        .map(|s| {
            let dim = s.features[0].len();
            let x = Array2::from_shape_fn((s.features.len(), dim), |(i, j)| s.features[i][j]);
            let preds = predict_labels(params, x.view())?;
            aggregate_patient(&s.slide_id, s.label, &preds)
        })
        .collect()
}

/// Chooses the threshold on training patients and scores validation patients.
pub fn evaluate_fold(
    params: &ClassifierParams,
    history: TrainHistory,
    prepared: &[PreparedSlide],
    fold: &Fold,
    fold_index: usize,
) -> Result<FoldReport> {
    let (train_slides, val_slides) = fold_slides(prepared, fold)?;
    let pairs = |scores: &[PatientScore]| scores.iter().map(|s| (s.score, s.label)).collect::<Vec<_>>();
    let train_scores = patient_scores(params, &train_slides)?;
    let threshold = select_threshold(&roc_curve(&pairs(&train_scores))?);
    let val_scores = patient_scores(params, &val_slides)?;
    let roc = roc_curve(&pairs(&val_scores))?;
    let predicted: Vec<PrognosisLabel> = val_scores.iter().map(|s| classify(s.score, threshold)).collect();
    let labels: Vec<PrognosisLabel> = val_scores.iter().map(|s| s.label).collect();
    let (confusion, m) = confusion_metrics(&predicted, &labels)?;
    Ok(FoldReport {
        fold: fold_index,
        threshold,
        sensitivity: m.sensitivity,
        specificity: m.specificity,
        f1: m.f1,
        accuracy: m.accuracy,
        auc: auc(&roc),
        confusion,
        train_slides: train_slides.len(),
        validation_slides: val_slides.len(),
        train_patches: train_slides.iter().map(|s| s.coords.len()).sum(),
        validation_patches: val_slides.iter().map(|s| s.coords.len()).sum(),
        history,
        validation_scores: val_scores,
        roc,
    })
}

pub fn assemble_report(
    prepared: &[PreparedSlide],
    cfg: &PipelineConfig,
    folds: Vec<FoldReport>,
    features: FeatureKind,
    notes: Vec<String>,
) -> CvReport {
    let warnings = prepared
        .iter()
        .filter(|s| s.coords.is_empty())
        .map(|s| {
            format!(
                "slide {} has no valid patches; excluded from training and scoring",
                s.slide_id
            )
        })
        .collect();
    CvReport {
        config: cfg.clone(),
        input_dim: cfg.input_dim(),
        features,
        augmentation: folds.iter().any(|f| f.history.augmented),
        notes,
        warnings,
        mean: MeanReport::of(&folds),
        folds,
    }
}

/// Runs every fold on already prepared slides. Folds run in parallel when
/// the config allows it; each fold is deterministic on its own.
pub fn run_prepared(
    prepared: &[PreparedSlide],
    cfg: &PipelineConfig,
    features: FeatureKind,
    notes: Vec<String>,
) -> Result<CvReport> {
    cfg.validate()?;
    let folds = make_folds(prepared, cfg)?;
    let reports = cfg.parallelism.map_indexed(folds.len(), |i| {
        let k = i + 1;
        let (params, history) = train_fold(prepared, &folds[i], k, cfg)?;
        evaluate_fold(&params, history, prepared, &folds[i], k)
    });
    let reports = reports
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::Fold {
                fold: i + 1,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble_report(prepared, cfg, reports, features, notes))
}

pub fn run_cross_validation(cohort: &Cohort, cfg: &PipelineConfig, source: &FeatureSource) -> Result<CvReport> {
    let prepared = prepare_cohort(cohort, cfg, source)?;
    let mut notes = Vec::new();
    if matches!(source, FeatureSource::Imported(_)) && cfg.train.augmentation_enabled {
        notes.push("imported embeddings: pixel augmentation unavailable and skipped".to_string());
    }
    run_prepared(&prepared, cfg, source.kind(), notes)
}
