//! Versioned binary checkpoint of classifier weights and training setup.
//!
//! ```text
//! magic "PGCKPT\0\0" | version u32
//! n_mag u32 | n_mag x (magnification*10 u32)
//! seed u64
//! config: learning_rate f64 | momentum f64 | dropout_rate f64 | max_epochs u64 | patience u64
//!         min_delta f64 | batch_size u64 | seed u64 | augmentation u8 | hidden_units u64
//! 6 x (rows u64 | cols u64 | rows*cols f32)   // w1 b1 w2 b2 w3 b3, biases as 1 x n
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{ClassifierParams, TrainConfig};
use crate::error::{Error, Result};
use crate::pyramid::Magnification;

const MAGIC: &[u8; 8] = b"PGCKPT\0\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ClassifierParams<f32>,
    pub config: TrainConfig,
    pub seed: u64,
    pub magnifications: Vec<Magnification>,
}

fn put_matrix(buf: &mut Vec<u8>, rows: usize, cols: usize, data: &[f32]) {
    buf.extend_from_slice(&(rows as u64).to_le_bytes());
    buf.extend_from_slice(&(cols as u64).to_le_bytes());
    buf.reserve(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let p = &ckpt.params;
    let c = &ckpt.config;
    let mut buf = Vec::with_capacity(p.num_parameters() * 4 + 256);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(ckpt.magnifications.len() as u32).to_le_bytes());
    for m in &ckpt.magnifications {
        buf.extend_from_slice(&((m.value() * 10.0) as u32).to_le_bytes());
    }
    buf.extend_from_slice(&ckpt.seed.to_le_bytes());
    buf.extend_from_slice(&c.learning_rate.to_le_bytes());
    buf.extend_from_slice(&c.momentum.to_le_bytes());
    buf.extend_from_slice(&c.dropout_rate.to_le_bytes());
    buf.extend_from_slice(&(c.max_epochs as u64).to_le_bytes());
    buf.extend_from_slice(&(c.patience as u64).to_le_bytes());
    buf.extend_from_slice(&c.min_delta.to_le_bytes());
    buf.extend_from_slice(&(c.batch_size as u64).to_le_bytes());
    buf.extend_from_slice(&c.seed.to_le_bytes());
    buf.push(u8::from(c.augmentation_enabled));
    buf.extend_from_slice(&(c.hidden_units as u64).to_le_bytes());
    let s = p.slices();
    put_matrix(&mut buf, p.w1.nrows(), p.w1.ncols(), s[0]);
    put_matrix(&mut buf, 1, p.b1.len(), s[1]);
    put_matrix(&mut buf, p.w2.nrows(), p.w2.ncols(), s[2]);
    put_matrix(&mut buf, 1, p.b2.len(), s[3]);
    put_matrix(&mut buf, p.w3.nrows(), p.w3.ncols(), s[4]);
    put_matrix(&mut buf, 1, p.b3.len(), s[5]);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn arr<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.arr()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.arr()?))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format(self.path, "size overflow"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.arr()?))
    }

    fn matrix(&mut self) -> Result<(usize, usize, Vec<f32>)> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(self.path, "matrix size overflow"))?;
        let data = self
            .take(n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Ok((rows, cols, data))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        data: &data,
        pos: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let n_mag = r.u32()?;
    let magnifications = (0..n_mag)
        .map(|_| Magnification::from_value(f64::from(r.u32()?) / 10.0))
        .collect::<Result<Vec<_>>>()?;
    let seed = r.u64()?;
    let config = TrainConfig {
        learning_rate: r.f64()?,
        momentum: r.f64()?,
        dropout_rate: r.f64()?,
        max_epochs: r.usize()?,
        patience: r.usize()?,
        min_delta: r.f64()?,
        batch_size: r.usize()?,
        seed: r.u64()?,
        augmentation_enabled: r.take(1)?[0] != 0,
        hidden_units: r.usize()?,
    };
    let bad = |what: &str| Error::format(path, format!("inconsistent {what} shape"));
    let (in_dim, hidden, w1) = r.matrix()?;
    let (_, h1, b1) = r.matrix()?;
    let (h2r, h2c, w2) = r.matrix()?;
    let (_, h3, b2) = r.matrix()?;
    let (h4, outs, w3) = r.matrix()?;
    let (_, outs_b, b3) = r.matrix()?;
    if h1 != hidden || h2r != hidden || h2c != hidden || h3 != hidden || h4 != hidden || outs != outs_b {
        return Err(bad("layer"));
    }
    if r.pos != data.len() {
        return Err(Error::format(path, "trailing bytes in checkpoint"));
    }
    let params = ClassifierParams {
        w1: Array2::from_shape_vec((in_dim, hidden), w1).map_err(|_| bad("w1"))?,
        b1: Array1::from_vec(b1),
        w2: Array2::from_shape_vec((hidden, hidden), w2).map_err(|_| bad("w2"))?,
        b2: Array1::from_vec(b2),
        w3: Array2::from_shape_vec((hidden, outs), w3).map_err(|_| bad("w3"))?,
        b3: Array1::from_vec(b3),
    };
    Ok(Checkpoint {
        params,
        config,
        seed,
        magnifications,
    })
}
