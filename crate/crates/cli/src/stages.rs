//! One function per pipeline stage. Every stage reads the previous stage's
//! artifacts from the output directory, writes its own and a stage log.
//!
//! ```text
//! <output>/masks/<slide>/{tissue,annotation,lesion}.{png,json}
//! <output>/datasets/D_m<mags>_<t|v><k>.csv
//! <output>/embeddings.bin
//! <output>/models/fold<k>.ckpt, fold<k>_history.json
//! <output>/eval/fold<k>.json
//! <output>/report/{report.json,report.csv,roc_fold<k>.csv,roc.svg}
//! <output>/logs/<stage>.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use prognosis_core::classifier::{read_checkpoint, write_checkpoint, Checkpoint, TrainHistory};
use prognosis_core::cohort::{Cohort, CohortIndex, IndexEntry, SyntheticCohortSpec, INDEX_FILE};
use prognosis_core::embedding::{
    import_embeddings, write_embeddings, Embedder, EmbeddingRecord, EmbeddingTable, PatchRef, EMBEDDING_DIM,
};
use prognosis_core::evaluation::{
    assemble_report, evaluate_fold, fold_train_config, train_fold, write_report, FoldReport,
};
use prognosis_core::masking::{mask_slide, read_mask, write_mask};
use prognosis_core::patching::{
    build_dataset, dataset_file_name, extract_valid_coordinates, read_manifest, stratified_kfold, write_manifest, Fold,
    PatchCoordinate, SlideCoordinates, Split,
};
use prognosis_core::pipeline::{embed_views, read_patches, FeatureKind, PipelineConfig, PreparedSlide};
use prognosis_core::pyramid::{generate_synthetic_slide, write_pyramid, MIN_SIDE_40X};
use prognosis_core::Parallelism;
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

const MASK_STEMS: [&str; 3] = ["tissue", "annotation", "lesion"];

pub struct Context {
    pub run: RunConfig,
    pub pipeline: PipelineConfig,
    pub workers: usize,
    pub force: bool,
    pub fold: Option<usize>,
    /// External embedding file replacing the reference features.
    pub embeddings: Option<PathBuf>,
}

#[derive(Serialize)]
struct StageLog<'a> {
    stage: &'a str,
    version: &'a str,
    base_seed: u64,
    workers: usize,
    config: &'a PipelineConfig,
    elapsed_seconds: f64,
    artifacts: Vec<String>,
    notes: Vec<String>,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Stage(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Stage(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Stage(format!("{}: {e}", path.display())))
}

impl Context {
    fn out(&self, rel: &str) -> PathBuf {
        self.run.output.join(rel)
    }

    fn cohort(&self) -> Result<Cohort, CliError> {
        if !self.run.cohort.join(INDEX_FILE).is_file() {
            return Err(CliError::Validation(format!(
                "no cohort index at {}; run synth first",
                self.run.cohort.join(INDEX_FILE).display()
            )));
        }
        Ok(Cohort::open(&self.run.cohort)?)
    }

    fn folds(&self, cohort: &Cohort) -> Result<Vec<Fold>, CliError> {
        Ok(stratified_kfold(
            &cohort.patients(),
            self.pipeline.folds,
            self.pipeline.seeds.split,
        )?)
    }

    /// 1-based fold indices selected by `--fold`, or all of them.
    fn selected_folds(&self) -> Result<Vec<usize>, CliError> {
        match self.fold {
            Some(k) if k == 0 || k > self.pipeline.folds => Err(CliError::Validation(format!(
                "--fold {k} outside 1..={}",
                self.pipeline.folds
            ))),
            Some(k) => Ok(vec![k]),
            None => Ok((1..=self.pipeline.folds).collect()),
        }
    }

    fn dataset_path(&self, split: Split, k: usize) -> PathBuf {
        self.out("datasets")
            .join(dataset_file_name(&self.pipeline.magnifications, split, k))
    }

    fn embeddings_path(&self) -> PathBuf {
        self.embeddings.clone().unwrap_or_else(|| self.out("embeddings.bin"))
    }

    fn feature_kind(&self) -> FeatureKind {
        if self.embeddings.is_some() {
            FeatureKind::Imported
        } else {
            FeatureKind::Reference
        }
    }

    fn notes(&self) -> Vec<String> {
        match (&self.embeddings, self.pipeline.train.augmentation_enabled) {
            (Some(_), true) => vec!["imported embeddings: pixel augmentation unavailable and skipped".to_string()],
            _ => Vec::new(),
        }
    }

    fn log(&self, stage: &str, started: Instant, artifacts: Vec<String>, notes: Vec<String>) -> Result<(), CliError> {
        let log = StageLog {
            stage,
            version: prognosis_core::VERSION,
            base_seed: self.run.seed,
            workers: self.workers,
            config: &self.pipeline,
            elapsed_seconds: started.elapsed().as_secs_f64(),
            artifacts,
            notes,
        };
        write_json(&self.out(&format!("logs/{stage}.json")), &log)
    }

    fn parallelism(&self) -> Parallelism {
        self.pipeline.parallelism
    }

    /// Coordinates of every cohort slide for fold `k`, from its manifests.
    fn fold_coordinates(&self, cohort: &Cohort, k: usize) -> Result<BTreeMap<String, Vec<PatchCoordinate>>, CliError> {
        let mut by_slide: BTreeMap<String, Vec<PatchCoordinate>> = cohort
            .entries
            .iter()
            .map(|e| (e.slide_id.clone(), Vec::new()))
            .collect();
        for split in [Split::Train, Split::Validation] {
            let path = self.dataset_path(split, k);
            if !path.is_file() {
                return Err(CliError::Validation(format!(
                    "dataset {} missing; run extract first",
                    path.display()
                )));
            }
            let manifest = read_manifest(&path)?;
            if manifest.seed != self.pipeline.seeds.sampling
                || manifest.cap != self.pipeline.cap
                || manifest.patch_size != self.pipeline.patch_size
            {
                return Err(CliError::Validation(format!(
                    "dataset {} was built with a different configuration; run extract first",
                    path.display()
                )));
            }
            for e in manifest.entries {
                by_slide
                    .get_mut(&e.slide_id)
                    .ok_or_else(|| CliError::Stage(format!("dataset lists unknown slide {}", e.slide_id)))?
                    .push(e);
            }
        }
        Ok(by_slide)
    }

    fn embedding_table(&self) -> Result<EmbeddingTable, CliError> {
        let path = self.embeddings_path();
        if !path.is_file() {
            return Err(CliError::Validation(format!(
                "embedding file {} missing; run extract first",
                path.display()
            )));
        }
        Ok(import_embeddings(&path)?)
    }

    /// Slides of fold `k` with features attached; training slides also carry
    /// their rasters when augmentation can run.
    fn prepared(
        &self,
        cohort: &Cohort,
        fold: &Fold,
        k: usize,
        table: Option<&EmbeddingTable>,
        with_rasters: bool,
    ) -> Result<Vec<PreparedSlide>, CliError> {
        let coords = self.fold_coordinates(cohort, k)?;
        let cfg = &self.pipeline;
        let slides = cfg
            .parallelism
            .map_indexed(cohort.len(), |i| -> Result<PreparedSlide, CliError> {
                let entry = &cohort.entries[i];
                let cs = coords[&entry.slide_id].clone();
                let features = match table {
                    Some(t) => {
                        let refs: Vec<PatchRef> = cs.iter().map(|c| PatchRef::new(&c.slide_id, c.center_20x)).collect();
                        let (found, missing) = t.resolve(&refs, &cfg.magnifications)?;
                        if let Some(m) = missing.first() {
                            return Err(CliError::Stage(format!(
                                "embedding file has no entry for patch {m}; run extract first"
                            )));
                        }
                        found.into_iter().map(|f| f.into_values()).collect()
                    }
                    None => Vec::new(),
                };
                let rasters = if with_rasters && fold.train.contains(&entry.slide_id) {
                    let pyramid = cohort.load(i)?;
                    Some(
                        cs.iter()
                            .map(|c| read_patches(&pyramid, c, &cfg.magnifications, cfg.patch_size))
                            .collect::<prognosis_core::Result<Vec<_>>>()?,
                    )
                } else {
                    None
                };
                Ok(PreparedSlide {
                    slide_id: entry.slide_id.clone(),
                    label: entry.label,
                    valid_patches: cs.len(),
                    coords: cs,
                    features,
                    rasters,
                })
            });
        slides.into_iter().collect()
    }

    fn model_path(&self, k: usize) -> PathBuf {
        self.out(&format!("models/fold{k}.ckpt"))
    }

    fn history_path(&self, k: usize) -> PathBuf {
        self.out(&format!("models/fold{k}_history.json"))
    }

    fn eval_path(&self, k: usize) -> PathBuf {
        self.out(&format!("eval/fold{k}.json"))
    }
}

pub struct SynthRequest {
    pub out: PathBuf,
    pub n_good: usize,
    pub n_bad: usize,
    pub seed: u64,
    pub size: u32,
    pub signal_strength: f64,
    pub force: bool,
    pub parallelism: Parallelism,
}

pub fn synth(req: &SynthRequest) -> Result<(), CliError> {
    let started = Instant::now();
    if req.out.exists() {
        let non_empty = fs::read_dir(&req.out)
            .map_err(|e| io_err(&req.out, e))?
            .next()
            .is_some();
        if non_empty && !req.force {
            return Err(CliError::Validation(format!(
                "{} exists and is not empty; pass --force to overwrite",
                req.out.display()
            )));
        }
    }
    if req.n_good == 0 || req.n_bad == 0 {
        return Err(CliError::Validation(
            "cohort needs at least one slide of each class".into(),
        ));
    }
    let mut spec = SyntheticCohortSpec::new(req.n_good, req.n_bad, req.seed);
    spec.size_40x = (req.size, req.size);
    spec.signal_strength = req.signal_strength;
    let specs = spec.slide_specs();
    if req.size < MIN_SIDE_40X || !(0.0..=1.0).contains(&req.signal_strength) {
        return Err(CliError::Validation(format!(
            "synthetic slides need size >= {MIN_SIDE_40X} and signal strength in [0, 1]"
        )));
    }
    let written = req.parallelism.map(&specs, |s| -> Result<IndexEntry, CliError> {
        let slide = generate_synthetic_slide(s)?;
        write_pyramid(&slide.pyramid, &req.out.join(&s.slide_id))?;
        Ok(IndexEntry {
            slide_id: s.slide_id.clone(),
            label: s.label,
            dir: s.slide_id.clone(),
        })
    });
    let slides = written.into_iter().collect::<Result<Vec<_>, _>>()?;
    let index = CohortIndex {
        format_version: 1,
        generator: Some(spec),
        slides,
    };
    index.write(&req.out)?;
    #[derive(Serialize)]
    struct SynthLog<'a> {
        stage: &'a str,
        version: &'a str,
        seed: u64,
        slides: usize,
        elapsed_seconds: f64,
    }
    write_json(
        &req.out.join("logs/synth.json"),
        &SynthLog {
            stage: "synth",
            version: prognosis_core::VERSION,
            seed: req.seed,
            slides: index.slides.len(),
            elapsed_seconds: started.elapsed().as_secs_f64(),
        },
    )?;
    eprintln!(
        "synth: {} slides ({} good, {} bad) in {}",
        index.slides.len(),
        req.n_good,
        req.n_bad,
        req.out.display()
    );
    Ok(())
}

pub fn mask(ctx: &Context) -> Result<(), CliError> {
    let started = Instant::now();
    let cohort = ctx.cohort()?;
    let m = ctx.pipeline.masking;
    let results = ctx
        .parallelism()
        .map_indexed(cohort.len(), |i| -> Result<bool, CliError> {
            let dir = ctx.out("masks").join(&cohort.entries[i].slide_id);
            if !ctx.force {
                if let Ok((_, side)) = read_mask(&dir, "lesion") {
                    if side.thresholds == m.thresholds && side.radius == m.radius {
                        return Ok(false);
                    }
                }
            }
            let pyramid = cohort.load(i)?;
            let masks = mask_slide(&pyramid, &m)?;
            for (stem, mask) in MASK_STEMS.iter().zip([&masks.tissue, &masks.annotation, &masks.lesion]) {
                write_mask(mask, &dir, stem, &m.thresholds, m.radius)?;
            }
            Ok(true)
        });
    let computed = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let fresh = computed.iter().filter(|&&c| c).count();
    eprintln!("mask: {fresh} computed, {} up to date", computed.len() - fresh);
    ctx.log(
        "mask",
        started,
        vec![ctx.out("masks").display().to_string()],
        Vec::new(),
    )
}

pub fn extract(ctx: &Context) -> Result<(), CliError> {
    let started = Instant::now();
    let cohort = ctx.cohort()?;
    let cfg = &ctx.pipeline;
    let mut slides = Vec::with_capacity(cohort.len());
    for e in &cohort.entries {
        let dir = ctx.out("masks").join(&e.slide_id);
        let (lesion, side) = read_mask(&dir, "lesion").map_err(|_| {
            CliError::Validation(format!("lesion mask for slide {} missing; run mask first", e.slide_id))
        })?;
        if side.thresholds != cfg.masking.thresholds || side.radius != cfg.masking.radius {
            return Err(CliError::Validation(format!(
                "mask of slide {} was computed with other settings; run mask first",
                e.slide_id
            )));
        }
        slides.push(SlideCoordinates {
            slide_id: e.slide_id.clone(),
            label: e.label,
            coords: extract_valid_coordinates(&lesion, e.label, cfg.patch_size, cfg.coverage_min)?,
        });
    }

    let mut artifacts = Vec::new();
    let folds = ctx.folds(&cohort)?;
    for k in ctx.selected_folds()? {
        let (t, v) = build_dataset(
            &slides,
            &folds[k - 1],
            k,
            &cfg.magnifications,
            cfg.patch_size,
            cfg.cap,
            cfg.seeds.sampling,
        )?;
        for m in [t, v] {
            artifacts.push(write_manifest(&m, &ctx.out("datasets"))?.display().to_string());
        }
    }

    let bank = cfg.embedders()?;
    let embedders: Vec<&dyn Embedder> = bank.iter().map(|e| e as &dyn Embedder).collect();
    let per_slide = ctx
        .parallelism()
        .map_indexed(cohort.len(), |i| -> Result<Vec<EmbeddingRecord>, CliError> {
            let sc = &slides[i];
            if sc.coords.is_empty() {
                return Ok(Vec::new());
            }
            let pyramid = cohort.load(i)?;
            sc.sampled(cfg.cap, cfg.seeds.sampling)?
                .iter()
                .map(|c| {
                    let views = read_patches(&pyramid, c, &cfg.magnifications, cfg.patch_size)?;
                    let values = embed_views(&views, &embedders)?;
                    Ok(EmbeddingRecord {
                        patch_ref: PatchRef::new(&c.slide_id, c.center_20x),
                        vectors: values.chunks(EMBEDDING_DIM).map(<[f32]>::to_vec).collect(),
                    })
                })
                .collect()
        });
    let records: Vec<EmbeddingRecord> = per_slide
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();
    let emb_path = ctx.out("embeddings.bin");
    write_embeddings(&emb_path, &cfg.magnifications, &records)?;
    artifacts.push(emb_path.display().to_string());

    let empty: Vec<String> = slides
        .iter()
        .filter(|s| s.coords.is_empty())
        .map(|s| format!("slide {} has no valid patches", s.slide_id))
        .collect();
    eprintln!(
        "extract: {} patches from {} slides, input dimension {}",
        records.len(),
        slides.len(),
        cfg.input_dim()
    );
    ctx.log("extract", started, artifacts, empty)
}

pub fn train(ctx: &Context) -> Result<(), CliError> {
    let started = Instant::now();
    let cohort = ctx.cohort()?;
    let cfg = &ctx.pipeline;
    let table = ctx.embedding_table()?;
    let folds = ctx.folds(&cohort)?;
    let selected = ctx.selected_folds()?;
    let with_rasters = cfg.train.augmentation_enabled && ctx.embeddings.is_none();
    let mut artifacts = Vec::new();
    for &k in &selected {
        let fold = &folds[k - 1];
        let path = ctx.model_path(k);
        let expected = fold_train_config(cfg, k);
        if !ctx.force && ctx.history_path(k).is_file() {
            if let Ok(ckpt) = read_checkpoint(&path) {
                if ckpt.config == expected && ckpt.magnifications == cfg.magnifications && ckpt.seed == ctx.run.seed {
                    eprintln!("train: fold {k} up to date");
                    continue;
                }
            }
        }
        let prepared = ctx.prepared(&cohort, fold, k, Some(&table), with_rasters)?;
        let (params, history) =
            train_fold(&prepared, fold, k, cfg).map_err(|e| CliError::Stage(format!("fold {k} failed: {e}")))?;
        eprintln!(
            "train: fold {k} stopped after epoch {} ({:?}), best epoch {}, input dimension {}",
            history.stopped_epoch,
            history.stop_reason,
            history.best_epoch,
            params.input_dim()
        );
        fs::create_dir_all(ctx.out("models")).map_err(|e| io_err(&ctx.out("models"), e))?;
        write_checkpoint(
            &path,
            &Checkpoint {
                params,
                config: expected,
                seed: ctx.run.seed,
                magnifications: cfg.magnifications.clone(),
            },
        )?;
        write_json(&ctx.history_path(k), &history)?;
        artifacts.push(path.display().to_string());
    }
    ctx.log("train", started, artifacts, ctx.notes())
}

pub fn eval(ctx: &Context) -> Result<(), CliError> {
    let started = Instant::now();
    let cohort = ctx.cohort()?;
    let folds = ctx.folds(&cohort)?;
    let mut artifacts = Vec::new();
    let mut table = None;
    for k in ctx.selected_folds()? {
        let path = ctx.model_path(k);
        if !path.is_file() || !ctx.history_path(k).is_file() {
            return Err(CliError::Validation(format!("no model for fold {k}; run train first")));
        }
        let ckpt = read_checkpoint(&path)?;
        if ckpt.magnifications != ctx.pipeline.magnifications {
            return Err(CliError::Validation(format!(
                "model for fold {k} uses other magnifications; run train first"
            )));
        }
        let history: TrainHistory = read_json(&ctx.history_path(k))?;
        if table.is_none() {
            table = Some(ctx.embedding_table()?);
        }
        let prepared = ctx.prepared(&cohort, &folds[k - 1], k, table.as_ref(), false)?;
        let report = evaluate_fold(&ckpt.params, history, &prepared, &folds[k - 1], k)
            .map_err(|e| CliError::Stage(format!("fold {k} failed: {e}")))?;
        eprintln!(
            "eval: fold {k} threshold {:.4} AUC {:.4} sensitivity {:.4} specificity {:.4}",
            report.threshold, report.auc, report.sensitivity, report.specificity
        );
        write_json(&ctx.eval_path(k), &report)?;
        artifacts.push(ctx.eval_path(k).display().to_string());
    }
    ctx.log("eval", started, artifacts, ctx.notes())
}

pub fn report(ctx: &Context) -> Result<(), CliError> {
    let started = Instant::now();
    let cohort = ctx.cohort()?;
    let folds = ctx.folds(&cohort)?;
    let mut reports: Vec<FoldReport> = Vec::new();
    for k in 1..=ctx.pipeline.folds {
        let path = ctx.eval_path(k);
        if !path.is_file() {
            return Err(CliError::Validation(format!(
                "no evaluation for fold {k}; run eval first"
            )));
        }
        reports.push(read_json(&path)?);
    }
    let slides = ctx.prepared(&cohort, &folds[0], 1, None, false)?;
    let report = assemble_report(&slides, &ctx.pipeline, reports, ctx.feature_kind(), ctx.notes());
    let written = write_report(&report, &ctx.out("report"))?;
    let m = &report.mean;
    eprintln!(
        "report: mean AUC {:.4} sensitivity {:.4} specificity {:.4} F1 {:.4} accuracy {:.4}",
        m.auc, m.sensitivity, m.specificity, m.f1, m.accuracy
    );
    ctx.log(
        "report",
        started,
        written.iter().map(|p| p.display().to_string()).collect(),
        report.notes.clone(),
    )
}
