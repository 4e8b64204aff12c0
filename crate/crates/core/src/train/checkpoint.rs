//! `RSCK` checkpoints.
//!
//! Layout (little-endian):
//!
//! | field | encoding |
//! |-------|----------|
//! | magic | `RSCK` |
//! | version | u32, currently 1 |
//! | config | u32 byte length, then `key = value` lines (UTF-8) |
//! | entries | u32 count, then per entry: u16 name length, name, u8 rank, rank x u32 extents, f32 data |
//!
//! Trainable tensors come first in layer order, followed by batch-norm
//! running statistics as `{layer}.running_mean` and `{layer}.running_var`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::data::write_atomic;
use crate::model::{build_model, ModelConfig, ModelError, ParamStore};
use crate::tensor::Tensor;

pub const RSCK_MAGIC: &[u8; 4] = b"RSCK";
pub const RSCK_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported checkpoint version {0} (expected {RSCK_VERSION})")]
    Version(u32),
    #[error("truncated checkpoint: need {needed} bytes at offset {at}, file has {len}")]
    Truncated { at: usize, needed: usize, len: usize },
    #[error("{0} trailing bytes after the last entry")]
    Trailing(usize),
    #[error("unknown parameter {0:?} for this architecture")]
    UnknownParam(String),
    #[error("parameter {0:?} missing from checkpoint")]
    MissingParam(String),
    #[error("parameter {0:?} appears twice")]
    Duplicate(String),
    #[error("parameter {name:?} has shape {got:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error(transparent)]
    Config(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T, E = CheckpointError> = std::result::Result<T, E>;

fn put_entry(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| CheckpointError::Invalid(format!("name {name:?} too long")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    let rank = u8::try_from(shape.len()).map_err(|_| CheckpointError::Invalid(format!("rank of {name:?}")))?;
    out.push(rank);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| CheckpointError::Invalid(format!("extent of {name:?}")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn checkpoint_to_bytes(store: &ParamStore<f32>, config: &ModelConfig) -> Result<Vec<u8>> {
    let text = config.to_kv();
    let mut out = Vec::new();
    out.extend_from_slice(RSCK_MAGIC);
    out.extend_from_slice(&RSCK_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let count = store.len() + 2 * store.running_iter().count();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, t) in store.iter() {
        put_entry(&mut out, name, t.shape(), t.data())?;
    }
    for (name, s) in store.running_iter() {
        put_entry(&mut out, &format!("{name}.running_mean"), &[s.mean.len()], &s.mean)?;
        put_entry(&mut out, &format!("{name}.running_var"), &[s.var.len()], &s.var)?;
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(CheckpointError::Truncated {
                at: self.at,
                needed: n,
                len: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|e| CheckpointError::Invalid(format!("non-UTF-8 text: {e}")))
    }
}

/// Parses a checkpoint and loads it into the architecture its config names.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ParamStore<f32>, ModelConfig)> {
    let mut r = Reader { bytes, at: 0 };
    let magic = r.take(4).map_err(|_| CheckpointError::BadMagic(bytes.to_vec()))?;
    if magic != RSCK_MAGIC {
        return Err(CheckpointError::BadMagic(magic.to_vec()));
    }
    let version = r.u32()?;
    if version != RSCK_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let text_len = r.u32()? as usize;
    let config = ModelConfig::from_kv(r.str(text_len)?)?;
    let mut store = build_model::<f32>(&config, 0)?;
    let count = r.u32()? as usize;
    let mut seen = HashSet::new();
    for _ in 0..count {
        let name_len = usize::from(r.u16()?);
        let name = r.str(name_len)?.to_string();
        let rank = usize::from(r.u8()?);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| CheckpointError::Invalid(format!("{name:?} too large")))?,
        )?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::Duplicate(name));
        }
        let shape_err = |expected: Vec<usize>| CheckpointError::Shape {
            name: name.clone(),
            expected,
            got: shape.clone(),
        };
        if let Some(dst) = store.get_mut(&name) {
            if dst.shape() != shape.as_slice() {
                return Err(shape_err(dst.shape().to_vec()));
            }
            *dst = Tensor::new(shape.clone(), data).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
            continue;
        }
        let (layer, which) = match (name.strip_suffix(".running_mean"), name.strip_suffix(".running_var")) {
            (Some(l), _) => (l, 0),
            (_, Some(l)) => (l, 1),
            _ => return Err(CheckpointError::UnknownParam(name)),
        };
        let stats = store
            .running_mut(layer)
            .ok_or_else(|| CheckpointError::UnknownParam(name.clone()))?;
        let dst = if which == 0 { &mut stats.mean } else { &mut stats.var };
        if shape != [dst.len()] {
            return Err(shape_err(vec![dst.len()]));
        }
        *dst = data;
    }
    if r.at != bytes.len() {
        return Err(CheckpointError::Trailing(bytes.len() - r.at));
    }
    let expected = store
        .names()
        .map(str::to_string)
        .chain(
            store
                .running_iter()
                .flat_map(|(k, _)| [format!("{k}.running_mean"), format!("{k}.running_var")]),
        )
        .collect::<Vec<_>>();
    if let Some(missing) = expected.into_iter().find(|k| !seen.contains(k)) {
        return Err(CheckpointError::MissingParam(missing));
    }
    Ok((store, config))
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint(store: &ParamStore<f32>, config: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &checkpoint_to_bytes(store, config)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParamStore<f32>, ModelConfig)> {
    checkpoint_from_bytes(&fs::read(path)?)
}
