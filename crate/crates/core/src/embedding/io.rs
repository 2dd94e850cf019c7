//! Binary embedding files.
//!
//! Layout (little-endian):
//! ```text
//! magic "PGEMBED\0" | version u32 | n_mag u32 | n_mag x (magnification*10 u32) | count u64
//! count x record:
//!   id_len u32 | slide_id utf-8 | center_x i64 | center_y i64
//!   n_mag x (len u32 | len x f32)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{concat_features, ConcatFeature, FeatureVector, PatchRef, EMBEDDING_DIM};
use crate::error::{Error, Result};
use crate::pyramid::Magnification;

const MAGIC: &[u8; 8] = b"PGEMBED\0";
const VERSION: u32 = 1;

/// One patch with one raw vector per magnification, in header order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub patch_ref: PatchRef,
    pub vectors: Vec<Vec<f32>>,
}

pub fn write_embeddings(path: &Path, magnifications: &[Magnification], records: &[EmbeddingRecord]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(magnifications.len() as u32).to_le_bytes());
    for m in magnifications {
        buf.extend_from_slice(&((m.value() * 10.0) as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for rec in records {
        if rec.vectors.len() != magnifications.len() {
            return Err(Error::invalid(format!(
                "{} has {} vectors for {} magnifications",
                rec.patch_ref,
                rec.vectors.len(),
                magnifications.len()
            )));
        }
        let id = rec.patch_ref.slide_id.as_bytes();
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id);
        buf.extend_from_slice(&rec.patch_ref.center_20x.0.to_le_bytes());
        buf.extend_from_slice(&rec.patch_ref.center_20x.1.to_le_bytes());
        for v in &rec.vectors {
            buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Imported embeddings keyed by patch.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub magnifications: Vec<Magnification>,
    pub entries: BTreeMap<PatchRef, Vec<FeatureVector>>,
}

impl EmbeddingTable {
    /// Concatenated features for the requested magnifications (in that order),
    /// plus the patches that could not be resolved.
    pub fn resolve(
        &self,
        patches: &[PatchRef],
        magnifications: &[Magnification],
    ) -> Result<(Vec<ConcatFeature>, Vec<PatchRef>)> {
        let cols: Vec<usize> = magnifications
            .iter()
            .map(|m| {
                self.magnifications
                    .iter()
                    .position(|x| x == m)
                    .ok_or_else(|| Error::LevelNotAvailable(format!("{m} (embedding file)")))
            })
            .collect::<Result<_>>()?;
        let mut found = Vec::new();
        let mut missing = Vec::new();
        for p in patches {
            match self.entries.get(p) {
                Some(vectors) => {
                    let parts: Vec<FeatureVector> = cols.iter().map(|&c| vectors[c].clone()).collect();
                    found.push(concat_features(&parts)?);
                }
                None => missing.push(p.clone()),
            }
        }
        Ok((found, missing))
    }
}

pub fn import_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        data: &data,
        pos: 0,
        path,
    };
    if cur.take(8)? != MAGIC {
        return Err(Error::format(path, "not an embedding file (bad magic)"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let n_mag = cur.u32()? as usize;
    let magnifications = (0..n_mag)
        .map(|_| Magnification::from_value(f64::from(cur.u32()?) / 10.0))
        .collect::<Result<Vec<_>>>()?;
    let count = cur.u64()?;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let id_len = cur.u32()? as usize;
        let slide_id = std::str::from_utf8(cur.take(id_len)?)
            .map_err(|_| Error::format(path, "slide_id is not UTF-8"))?
            .to_string();
        let patch_ref = PatchRef::new(slide_id, (cur.i64()?, cur.i64()?));
        let mut vectors = Vec::with_capacity(n_mag);
        for &m in &magnifications {
            let len = cur.u32()? as usize;
            if len != EMBEDDING_DIM {
                return Err(Error::EmbeddingLength {
                    patch: patch_ref.to_string(),
                    len,
                    expected: EMBEDDING_DIM,
                });
            }
            let values = cur
                .take(len * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            vectors.push(FeatureVector::new(values, m, patch_ref.clone())?);
        }
        if entries.insert(patch_ref.clone(), vectors).is_some() {
            return Err(Error::format(path, format!("duplicate record {patch_ref}")));
        }
    }
    if cur.pos != data.len() {
        return Err(Error::format(path, "trailing bytes after last record"));
    }
    Ok(EmbeddingTable {
        magnifications,
        entries,
    })
}

/// Debug dump: `slide_id,center_x_20,center_y_20,magnification,f0..f511`.
pub fn export_embeddings_csv(path: &Path, table: &EmbeddingTable) -> Result<()> {
    let mut buf = Vec::new();
    let io_err = |e| Error::io(path, e);
    write!(buf, "slide_id,center_x_20,center_y_20,magnification").map_err(io_err)?;
    for i in 0..EMBEDDING_DIM {
        write!(buf, ",f{i}").map_err(io_err)?;
    }
    writeln!(buf).map_err(io_err)?;
    for (r, vectors) in &table.entries {
        for v in vectors {
            write!(
                buf,
                "{},{},{},{}",
                r.slide_id,
                r.center_20x.0,
                r.center_20x.1,
                v.magnification()
            )
            .map_err(io_err)?;
            for x in v.values() {
                write!(buf, ",{x}").map_err(io_err)?;
            }
            writeln!(buf).map_err(io_err)?;
        }
    }
    fs::write(path, buf).map_err(io_err)
}
