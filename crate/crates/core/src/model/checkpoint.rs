//! Flat binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "AEROCKPT"
//! version  u32      1
//! count    u32      number of records
//! record   repeated `count` times:
//!   name_len u32, name (UTF-8, name_len bytes),
//!   rank u32, dims u64 x rank,
//!   data f64 x product(dims)
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::params::ParamStore;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AEROCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("parameter {0} missing from checkpoint")]
    Missing(String),
    #[error("parameter {name}: checkpoint shape {found:?}, model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

pub fn write_checkpoint<T: Real, W: Write>(
    store: &ParamStore<T>,
    mut w: W,
) -> Result<(), CheckpointError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads every record of a checkpoint.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f64>)>, CheckpointError> {
    let mut magic = [0; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0; len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<io::Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let t = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

impl<T: Real> ParamStore<T> {
    /// Overwrites every parameter with the same-named checkpoint record.
    pub fn load_records(
        &mut self,
        records: &[(String, Tensor<f64>)],
    ) -> Result<(), CheckpointError> {
        let ids: Vec<_> = self.ids().collect();
        for id in ids {
            let name = self.name(id).to_string();
            let (_, t) = records
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            if t.shape() != self.get(id).shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    found: t.shape().to_vec(),
                    expected: self.get(id).shape().to_vec(),
                });
            }
            *self.get_mut(id) = t.cast();
        }
        Ok(())
    }
}
