//! Cohorts: the set of slides and labels a run operates on, either generated
//! on the fly from synthetic specs or stored as pyramid directories listed in
//! an `index.json`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::{
    generate_synthetic_slide, read_pyramid, LesionShape, PrognosisLabel, SlidePyramid, SyntheticSpec,
};
use crate::seeds;

pub const INDEX_FILE: &str = "index.json";
pub const DEFAULT_SYNTHETIC_SIDE: u32 = 2048;
pub const DEFAULT_SIGNAL_STRENGTH: f64 = 0.8;
const TAG_LABEL_SHUFFLE: u64 = 0x5348_5546;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCohortSpec {
    pub n_good: usize,
    pub n_bad: usize,
    pub seed: u64,
    pub size_40x: (u32, u32),
    pub signal_strength: f64,
    #[serde(default)]
    pub lesion_shape: LesionShape,
}

impl SyntheticCohortSpec {
    pub fn new(n_good: usize, n_bad: usize, seed: u64) -> Self {
        SyntheticCohortSpec {
            n_good,
            n_bad,
            seed,
            size_40x: (DEFAULT_SYNTHETIC_SIDE, DEFAULT_SYNTHETIC_SIDE),
            signal_strength: DEFAULT_SIGNAL_STRENGTH,
            lesion_shape: LesionShape::default(),
        }
    }

    /// Slides `S001..`, good-prognosis slides first.
    pub fn slide_specs(&self) -> Vec<SyntheticSpec> {
        (0..self.n_good + self.n_bad)
            .map(|i| SyntheticSpec {
                slide_id: format!("S{:03}", i + 1),
                seed: seeds::derive(self.seed, &[seeds::TAG_SYNTH, i as u64]),
                label: if i < self.n_good {
                    PrognosisLabel::Good
                } else {
                    PrognosisLabel::Bad
                },
                size_40x: self.size_40x,
                lesion_shape: self.lesion_shape.clone(),
                signal_strength: self.signal_strength,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SlideSource {
    Synthetic(SyntheticSpec),
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortEntry {
    pub slide_id: String,
    /// Label used for training and evaluation; may differ from the label
    /// the slide was generated or stored with.
    pub label: PrognosisLabel,
    pub source: SlideSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub slide_id: String,
    pub label: PrognosisLabel,
    /// Directory relative to the index file.
    pub dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortIndex {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SyntheticCohortSpec>,
    pub slides: Vec<IndexEntry>,
}

impl CohortIndex {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: CohortIndex = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if index.format_version != 1 {
            return Err(Error::format(
                &path,
                format!("unsupported format_version {}", index.format_version),
            ));
        }
        Ok(index)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(INDEX_FILE);
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&path, e))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub entries: Vec<CohortEntry>,
}

impl Cohort {
    pub fn synthetic(spec: &SyntheticCohortSpec) -> Self {
        Cohort {
            entries: spec
                .slide_specs()
                .into_iter()
                .map(|s| CohortEntry {
                    slide_id: s.slide_id.clone(),
                    label: s.label,
                    source: SlideSource::Synthetic(s),
                })
                .collect(),
        }
    }

    /// Opens a cohort directory written by [`CohortIndex::write`].
    pub fn open(dir: &Path) -> Result<Self> {
        let index = CohortIndex::read(dir)?;
        Ok(Cohort {
            entries: index
                .slides
                .into_iter()
                .map(|e| CohortEntry {
                    source: SlideSource::Directory(dir.join(&e.dir)),
                    slide_id: e.slide_id,
                    label: e.label,
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn patients(&self) -> Vec<(String, PrognosisLabel)> {
        self.entries.iter().map(|e| (e.slide_id.clone(), e.label)).collect()
    }

    /// Loads slide `i` with the cohort's label applied.
    pub fn load(&self, i: usize) -> Result<SlidePyramid> {
        let entry = &self.entries[i];
        let pyramid = match &entry.source {
            SlideSource::Synthetic(spec) => generate_synthetic_slide(spec)?.pyramid,
            SlideSource::Directory(dir) => read_pyramid(dir)?,
        };
        if pyramid.slide_id() != entry.slide_id {
            return Err(Error::invalid(format!(
                "cohort entry {} resolved to slide {}",
                entry.slide_id,
                pyramid.slide_id()
            )));
        }
        Ok(pyramid.with_label(entry.label))
    }

    /// Same slides with the labels randomly permuted, preserving class counts.
    pub fn with_shuffled_labels(&self, seed: u64) -> Self {
        let mut labels: Vec<PrognosisLabel> = self.entries.iter().map(|e| e.label).collect();
        labels.shuffle(&mut seeds::rng(seed, &[TAG_LABEL_SHUFFLE]));
        Cohort {
            entries: self
                .entries
                .iter()
                .zip(labels)
                .map(|(e, label)| CohortEntry { label, ..e.clone() })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_cohort_shape() {
        let cohort = Cohort::synthetic(&SyntheticCohortSpec::new(26, 26, 7));
        assert_eq!(cohort.len(), 52);
        let bad = cohort.patients().iter().filter(|p| p.1.is_bad()).count();
        assert_eq!(bad, 26);
        assert_eq!(cohort.entries[0].slide_id, "S001");
        assert_eq!(cohort.entries[51].slide_id, "S052");
    }

    #[test]
    fn shuffle_preserves_counts_and_is_seeded() {
        let cohort = Cohort::synthetic(&SyntheticCohortSpec::new(10, 10, 1));
        let a = cohort.with_shuffled_labels(3);
        let b = cohort.with_shuffled_labels(3);
        assert_eq!(a, b);
        assert_eq!(a.patients().iter().filter(|p| p.1.is_bad()).count(), 10);
        assert_ne!(a.patients(), cohort.patients());
    }

    #[test]
    fn index_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let index = CohortIndex {
            format_version: 1,
            generator: Some(SyntheticCohortSpec::new(1, 1, 2)),
            slides: vec![IndexEntry {
                slide_id: "S001".into(),
                label: PrognosisLabel::Good,
                dir: "S001".into(),
            }],
        };
        index.write(dir.path()).unwrap();
        assert_eq!(CohortIndex::read(dir.path()).unwrap(), index);
        let cohort = Cohort::open(dir.path()).unwrap();
        assert_eq!(
            cohort.entries[0].source,
            SlideSource::Directory(dir.path().join("S001"))
        );
    }
}
