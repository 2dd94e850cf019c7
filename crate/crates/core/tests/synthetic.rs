mod common;

use prognosis_core::cohort::{Cohort, SyntheticCohortSpec};
use prognosis_core::embedding::{import_embeddings, write_embeddings, EmbeddingRecord, PatchRef, EMBEDDING_DIM};
use prognosis_core::evaluation::run_cross_validation;
use prognosis_core::masking::{mask_slide, MaskingConfig};
use prognosis_core::pipeline::{prepare_cohort, FeatureSource, PipelineConfig};
use prognosis_core::pyramid::{box_downsample, generate_synthetic_slide, Magnification};
use prognosis_core::PrognosisLabel;

#[test]
fn planted_signal_separates_the_classes() {
    let cohort = Cohort::synthetic(&SyntheticCohortSpec::new(26, 26, 7));
    let cfg = PipelineConfig::new(&[Magnification::X20], 7);
    let prepared = prepare_cohort(&cohort, &cfg, &FeatureSource::Reference).unwrap();
    let strong = common::separation(&prepared).iter().filter(|&&r| r > 3.0).count();
    assert!(strong >= 10, "{strong} separated dimensions");
}

#[test]
fn lesion_mask_tracks_the_planted_blob() {
    let spec = SyntheticCohortSpec::new(2, 2, 13);
    for s in spec.slide_specs() {
        let slide = generate_synthetic_slide(&s).unwrap();
        let lesion = mask_slide(&slide.pyramid, &MaskingConfig::default()).unwrap().lesion;
        let truth = &slide.lesion_truth;
        let (mut hit, mut blob, mut stray, mut background) = (0, 0, 0, 0);
        for (&t, &l) in truth.as_slice().iter().zip(lesion.as_slice()) {
            if t {
                blob += 1;
                hit += usize::from(l);
            } else {
                background += 1;
                stray += usize::from(l);
            }
        }
        let recall = hit as f64 / blob as f64;
        let leak = stray as f64 / background as f64;
        assert!(
            recall >= 0.9 && leak <= 0.01,
            "{}: recall {recall} leak {leak}",
            s.slide_id
        );
    }
}

#[test]
fn levels_agree_with_box_downsampling() {
    let spec = SyntheticCohortSpec::new(1, 1, 3);
    for s in spec.slide_specs() {
        let p = generate_synthetic_slide(&s).unwrap().pyramid;
        for (i, &hi) in Magnification::ALL.iter().enumerate() {
            for &lo in &Magnification::ALL[i + 1..] {
                let target = p.level(lo).unwrap();
                let down = box_downsample(p.level(hi).unwrap(), target.width(), target.height());
                let total: u64 = down
                    .as_raw()
                    .iter()
                    .zip(target.as_raw())
                    .map(|(&a, &b)| u64::from(a.abs_diff(b)))
                    .sum();
                let mae = total as f64 / target.as_raw().len() as f64;
                assert!(mae <= 2.0, "{hi} -> {lo}: {mae}");
            }
        }
    }
}

#[test]
fn imported_embeddings_reproduce_inline_results() {
    let cohort = Cohort::synthetic(&SyntheticCohortSpec::new(4, 4, 19));
    let mut cfg = PipelineConfig::new(&[Magnification::X20, Magnification::X40], 19);
    cfg.folds = 2;
    cfg.train.hidden_units = 32;
    cfg.train.max_epochs = 6;
    cfg.train.augmentation_enabled = false;
    let prepared = prepare_cohort(&cohort, &cfg, &FeatureSource::Reference).unwrap();
    let records: Vec<EmbeddingRecord> = prepared
        .iter()
        .flat_map(|s| s.coords.iter().zip(&s.features))
        .map(|(c, f)| EmbeddingRecord {
            patch_ref: PatchRef::new(&c.slide_id, c.center_20x),
            vectors: f.chunks(EMBEDDING_DIM).map(<[f32]>::to_vec).collect(),
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.bin");
    write_embeddings(&path, &cfg.magnifications, &records).unwrap();
    let table = import_embeddings(&path).unwrap();

    let inline = run_cross_validation(&cohort, &cfg, &FeatureSource::Reference).unwrap();
    let imported = run_cross_validation(&cohort, &cfg, &FeatureSource::Imported(table)).unwrap();
    assert_eq!(inline.folds, imported.folds);
    assert_eq!(inline.mean, imported.mean);
    assert!(inline.folds.iter().all(|f| f.train_patches > 0));
    assert!(prepared.iter().any(|s| s.label == PrognosisLabel::Bad));
}
