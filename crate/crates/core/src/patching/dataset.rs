//! Dataset manifests `D_m<mags>_<t|v><k>.csv`: a `#`-prefixed JSON header line
//! followed by a CSV body `slide_id,label,center_x_20,center_y_20`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{sample_coordinates, Fold, PatchCoordinate};
use crate::error::{Error, Result};
use crate::pyramid::{Magnification, PrognosisLabel};
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "t")]
    Train,
    #[serde(rename = "v")]
    Validation,
}

impl Split {
    pub fn letter(self) -> char {
        match self {
            Split::Train => 't',
            Split::Validation => 'v',
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub magnifications: Vec<Magnification>,
    pub split: Split,
    /// 1-based fold index.
    pub fold: usize,
    pub seed: u64,
    pub patch_size: u32,
    pub cap: usize,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub entries: Vec<PatchCoordinate>,
}

impl DatasetManifest {
    pub fn slide_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.entries.iter().map(|e| e.slide_id.clone()).collect();
        ids.dedup();
        ids
    }

    pub fn per_slide_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.slide_id.clone()).or_insert(0) += 1;
        }
        counts
    }
}

/// All valid coordinates of one slide before sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideCoordinates {
    pub slide_id: String,
    pub label: PrognosisLabel,
    pub coords: Vec<PatchCoordinate>,
}

impl SlideCoordinates {
    /// Per-slide capped sample; the sample depends only on (seed, slide) so
    /// every fold sees the same patches of a slide.
    pub fn sampled(&self, cap: usize, seed: u64) -> Result<Vec<PatchCoordinate>> {
        sample_coordinates(
            &self.coords,
            cap,
            seeds::derive(seed, &[seeds::hash_str(&self.slide_id)]),
        )
    }
}

pub fn dataset_file_name(mags: &[Magnification], split: Split, fold: usize) -> String {
    let mut sorted: Vec<Magnification> = mags.to_vec();
    sorted.sort();
    let tag: Vec<&str> = sorted.iter().map(|m| m.label()).collect();
    format!("D_m{}_{}{}.csv", tag.join("-"), split.letter(), fold)
}

/// Train and validation manifests for one fold (`fold_index` is 1-based).
pub fn build_dataset(
    slides: &[SlideCoordinates],
    fold: &Fold,
    fold_index: usize,
    magnifications: &[Magnification],
    patch_size: u32,
    cap: usize,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let by_id: BTreeMap<&str, &SlideCoordinates> = slides.iter().map(|s| (s.slide_id.as_str(), s)).collect();
    let make = |ids: &[String], split: Split| -> Result<DatasetManifest> {
        let mut entries = Vec::new();
        let mut warnings = Vec::new();
        for id in ids {
            let slide = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::invalid(format!("fold references unknown slide {id}")))?;
            if slide.coords.is_empty() {
                warnings.push(format!("slide {id} has no valid patches; skipped"));
                continue;
            }
            entries.extend(slide.sampled(cap, seed)?);
        }
        Ok(DatasetManifest {
            magnifications: magnifications.to_vec(),
            split,
            fold: fold_index,
            seed,
            patch_size,
            cap,
            warnings,
            entries,
        })
    };
    Ok((
        make(&fold.train, Split::Train)?,
        make(&fold.validation, Split::Validation)?,
    ))
}

pub fn write_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<std::path::PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(dataset_file_name(
        &manifest.magnifications,
        manifest.split,
        manifest.fold,
    ));
    let header = serde_json::to_string(manifest).map_err(|e| Error::json(&path, e))?;
    let mut buf = Vec::new();
    writeln!(buf, "# {header}").map_err(|e| Error::io(&path, e))?;
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let csv_err = |source| Error::Csv {
            path: path.clone(),
            source,
        };
        w.write_record(["slide_id", "label", "center_x_20", "center_y_20"])
            .map_err(csv_err)?;
        for e in &manifest.entries {
            w.write_record([
                e.slide_id.clone(),
                e.label.to_string(),
                e.center_20x.0.to_string(),
                e.center_20x.1.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| Error::io(path, e))?;
    let json = first
        .strip_prefix("# ")
        .ok_or_else(|| Error::format(path, "missing JSON header line"))?;
    let mut manifest: DatasetManifest = serde_json::from_str(json.trim_end()).map_err(|e| Error::json(path, e))?;
    let mut rdr = csv::Reader::from_reader(reader);
    for rec in rdr.records() {
        let rec = rec.map_err(|source| Error::Csv {
            path: path.into(),
            source,
        })?;
        if rec.len() != 4 {
            return Err(Error::format(path, format!("expected 4 columns, got {}", rec.len())));
        }
        let num = |i: usize| -> Result<i64> {
            rec[i]
                .parse()
                .map_err(|_| Error::format(path, format!("bad integer {:?}", &rec[i])))
        };
        manifest.entries.push(PatchCoordinate {
            slide_id: rec[0].to_string(),
            label: rec[1].parse()?,
            center_20x: (num(2)?, num(3)?),
        });
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::stratified_kfold;

    fn slide(id: &str, label: PrognosisLabel, n: usize) -> SlideCoordinates {
        SlideCoordinates {
            slide_id: id.into(),
            label,
            coords: (0..n as i64)
                .map(|i| PatchCoordinate {
                    slide_id: id.into(),
                    center_20x: (112 + 224 * (i % 40), 112 + 224 * (i / 40)),
                    label,
                })
                .collect(),
        }
    }

    #[test]
    fn file_names_mirror_dataset_notation() {
        assert_eq!(
            dataset_file_name(&[Magnification::X40, Magnification::X20], Split::Train, 1),
            "D_m20-40_t1.csv"
        );
        assert_eq!(
            dataset_file_name(
                &[Magnification::X10, Magnification::X20, Magnification::X40],
                Split::Validation,
                5
            ),
            "D_m10-20-40_v5.csv"
        );
    }

    #[test]
    fn fold_manifests_partition_and_cap() {
        let slides = vec![
            slide("a", PrognosisLabel::Good, 1000),
            slide("b", PrognosisLabel::Good, 10),
            slide("c", PrognosisLabel::Bad, 30),
            slide("d", PrognosisLabel::Bad, 0),
        ];
        let patients: Vec<_> = slides.iter().map(|s| (s.slide_id.clone(), s.label)).collect();
        let folds = stratified_kfold(&patients, 2, 4).unwrap();
        let (t, v) = build_dataset(&slides, &folds[0], 1, &[Magnification::X20], 224, 250, 9).unwrap();
        let mut all: Vec<String> = folds[0].train.iter().chain(&folds[0].validation).cloned().collect();
        all.sort();
        assert_eq!(all, vec!["a", "b", "c", "d"]);
        for id in t.slide_ids() {
            assert!(!v.slide_ids().contains(&id));
        }
        let counts: BTreeMap<_, _> = t.per_slide_counts().into_iter().chain(v.per_slide_counts()).collect();
        assert_eq!(counts.get("a"), Some(&250));
        assert_eq!(counts.get("b"), Some(&10));
        assert_eq!(counts.get("d"), None);
        let warnings: Vec<&String> = t.warnings.iter().chain(&v.warnings).collect();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("slide d"));
        assert!(t
            .entries
            .iter()
            .chain(&v.entries)
            .all(|e| e.label == slides.iter().find(|s| s.slide_id == e.slide_id).unwrap().label));
    }

    #[test]
    fn manifest_round_trip_and_byte_identical_rebuild() {
        let slides = vec![
            slide("a", PrognosisLabel::Good, 300),
            slide("b", PrognosisLabel::Bad, 5),
        ];
        let fold = Fold {
            train: vec!["a".into()],
            validation: vec!["b".into()],
        };
        let dir = tempfile::tempdir().unwrap();
        let (t, _) = build_dataset(&slides, &fold, 1, &[Magnification::X20], 224, 250, 3).unwrap();
        let path = write_manifest(&t, dir.path()).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, t);
        let bytes = fs::read(&path).unwrap();
        let (t2, _) = build_dataset(&slides, &fold, 1, &[Magnification::X20], 224, 250, 3).unwrap();
        write_manifest(&t2, dir.path()).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes);
    }
}
