//! In-memory volumes and the `MVF1` flat binary format.
//!
//! Layout (all little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `MVF1` |
//! | 1     | dtype: 0 = f32 intensities, 1 = u8 binary mask |
//! | 12    | dims `D, H, W` as u32 |
//! | 12    | spacing `z, y, x` in mm as f32 |
//! | ...   | row-major payload, `D*H*W` elements |

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DataError, Result};

pub const MVF_MAGIC: &[u8; 4] = b"MVF1";
pub const MVF_HEADER_LEN: usize = 4 + 1 + 12 + 12;

fn check_geometry(dims: [usize; 3], spacing: [f32; 3], len: usize) -> Result<()> {
    if dims.contains(&0) {
        return Err(DataError::Invalid(format!("zero extent in dims {dims:?}")));
    }
    if !spacing.iter().all(|&s| s.is_finite() && s > 0.0) {
        return Err(DataError::Invalid(format!("spacing must be positive, got {spacing:?}")));
    }
    if dims.iter().product::<usize>() != len {
        return Err(DataError::Invalid(format!(
            "payload of {len} voxels does not match dims {dims:?}"
        )));
    }
    Ok(())
}

/// Intensity volume, `(D, H, W)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f32>,
    spacing: [f32; 3],
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>, spacing: [f32; 3]) -> Result<Self> {
        check_geometry(dims, spacing, data.len())?;
        if !data.iter().all(|v| v.is_finite()) {
            return Err(DataError::Invalid("non-finite intensity".into()));
        }
        Ok(Self { dims, data, spacing })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let plane = self.dims[1] * self.dims[2];
        &self.data[z * plane..(z + 1) * plane]
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[(z * self.dims[1] + y) * self.dims[2] + x]
    }
}

/// Binary mask with physical voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeMask {
    dims: [usize; 3],
    voxels: Vec<u8>,
    spacing: [f32; 3],
}

impl VolumeMask {
    pub fn new(dims: [usize; 3], voxels: Vec<u8>, spacing: [f32; 3]) -> Result<Self> {
        check_geometry(dims, spacing, voxels.len())?;
        if let Some(&bad) = voxels.iter().find(|&&v| v > 1) {
            return Err(DataError::Invalid(format!("mask voxel {bad} is not binary")));
        }
        Ok(Self { dims, voxels, spacing })
    }

    pub fn empty(dims: [usize; 3], spacing: [f32; 3]) -> Result<Self> {
        Self::new(dims, vec![0; dims.iter().product()], spacing)
    }

    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f32; 3],
        mut f: impl FnMut(usize, usize, usize) -> bool,
    ) -> Result<Self> {
        let mut voxels = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    voxels.push(u8::from(f(z, y, x)));
                }
            }
        }
        Self::new(dims, voxels, spacing)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[u8] {
        &self.voxels
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.voxels[(z * self.dims[1] + y) * self.dims[2] + x] != 0
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.iter().all(|&v| v == 0)
    }

    pub fn with_spacing(&self, spacing: [f32; 3]) -> Result<Self> {
        Self::new(self.dims, self.voxels.clone(), spacing)
    }
}

/// Contents of an `MVF1` file.
#[derive(Debug, Clone, PartialEq)]
pub enum VolumeFile {
    Volume(Volume),
    Mask(VolumeMask),
}

fn header(dtype: u8, dims: [usize; 3], spacing: [f32; 3], payload: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(MVF_HEADER_LEN + payload);
    out.extend_from_slice(MVF_MAGIC);
    out.push(dtype);
    for d in dims {
        let d = u32::try_from(d).map_err(|_| DataError::Invalid(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    Ok(out)
}

impl VolumeFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        match self {
            VolumeFile::Volume(v) => {
                let mut out = header(0, v.dims, v.spacing, v.data.len() * 4)?;
                for x in &v.data {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                Ok(out)
            }
            VolumeFile::Mask(m) => {
                let mut out = header(1, m.dims, m.spacing, m.voxels.len())?;
                out.extend_from_slice(&m.voxels);
                Ok(out)
            }
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MVF_HEADER_LEN {
            return Err(DataError::Truncated {
                expected: MVF_HEADER_LEN,
                got: bytes.len(),
            });
        }
        if &bytes[..4] != MVF_MAGIC {
            return Err(DataError::BadMagic {
                expected: "MVF1",
                got: bytes[..4].to_vec(),
            });
        }
        let dtype = bytes[4];
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let dims = [u32_at(5), u32_at(9), u32_at(13)];
        let spacing = [f32_at(17), f32_at(21), f32_at(25)];
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| DataError::Invalid(format!("dims {dims:?} overflow")))?;
        let elem = match dtype {
            0 => 4,
            1 => 1,
            other => return Err(DataError::Invalid(format!("unknown dtype tag {other}"))),
        };
        let expected = count
            .checked_mul(elem)
            .and_then(|n| n.checked_add(MVF_HEADER_LEN))
            .ok_or_else(|| DataError::Invalid(format!("dims {dims:?} overflow")))?;
        if bytes.len() < expected {
            return Err(DataError::Truncated {
                expected,
                got: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(DataError::Invalid(format!(
                "{} trailing bytes after payload",
                bytes.len() - expected
            )));
        }
        let payload = &bytes[MVF_HEADER_LEN..];
        match dtype {
            0 => {
                let data = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Ok(VolumeFile::Volume(Volume::new(dims, data, spacing)?))
            }
            _ => Ok(VolumeFile::Mask(VolumeMask::new(dims, payload.to_vec(), spacing)?)),
        }
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn save_volume(file: &VolumeFile, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &file.to_bytes()?)?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<VolumeFile> {
    VolumeFile::from_bytes(&fs::read(path)?)
}

/// Loads a file that must hold intensities.
pub fn load_intensities(path: impl AsRef<Path>) -> Result<Volume> {
    match load_volume(path)? {
        VolumeFile::Volume(v) => Ok(v),
        VolumeFile::Mask(_) => Err(DataError::Invalid("expected an intensity volume, found a mask".into())),
    }
}

/// Loads a file that must hold a binary mask.
pub fn load_mask(path: impl AsRef<Path>) -> Result<VolumeMask> {
    match load_volume(path)? {
        VolumeFile::Mask(m) => Ok(m),
        VolumeFile::Volume(_) => Err(DataError::Invalid("expected a mask, found an intensity volume".into())),
    }
}
