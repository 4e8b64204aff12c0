//! Synthetic phantoms, volume files and slicing.

mod phantom;
mod sequence;
mod volume;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub use phantom::{generate_phantom, generate_set, phantom_seeds, PhantomSpec, MIN_DIMS};
pub use sequence::{normalize_intensity, to_sequence};
pub use volume::write_atomic;
pub use volume::{
    load_intensities, load_mask, load_volume, save_volume, Volume, VolumeFile, VolumeMask, MVF_HEADER_LEN, MVF_MAGIC,
};

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic: expected {expected:?}, found {got:?}")]
    BadMagic { expected: &'static str, got: Vec<u8> },
    #[error("truncated file: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Slice traversal order along the first volume axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Direction {
    /// Storage order, `z = 0` first.
    #[default]
    Ascending,
    Descending,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Direction::Ascending => "ascending",
            Direction::Descending => "descending",
        })
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ascending" => Ok(Direction::Ascending),
            "descending" => Ok(Direction::Descending),
            _ => Err(format!("unknown direction {s:?} (expected ascending or descending)")),
        }
    }
}
