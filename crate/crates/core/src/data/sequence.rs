//! Intensity windowing and volume-to-sequence slicing.

use super::volume::{Volume, VolumeMask};
use super::{DataError, Direction, Result};
use crate::recurrent::{Crop, SliceSequence};
use crate::tensor::Tensor;

/// Clamps to `[lo, hi]` and maps affinely onto `[0, 1]`.
pub fn normalize_intensity(v: &Volume, window: (f32, f32)) -> Result<Volume> {
    let (lo, hi) = window;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(DataError::Invalid(format!("degenerate window ({lo}, {hi})")));
    }
    let span = hi - lo;
    let data = v.data().iter().map(|&x| (x.clamp(lo, hi) - lo) / span).collect();
    Volume::new(v.dims(), data, v.spacing())
}

fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

fn pad_plane<V: Copy + Default>(src: &[V], h: usize, w: usize, crop: &Crop, hp: usize, wp: usize) -> Vec<V> {
    let mut out = vec![V::default(); hp * wp];
    for y in 0..h {
        let dst = (y + crop.top) * wp + crop.left;
        out[dst..dst + w].copy_from_slice(&src[y * w..(y + 1) * w]);
    }
    out
}

/// Cuts `v` into `(1, 1, H', W')` slices along its first axis.
///
/// `H'` and `W'` are `H`, `W` rounded up to a multiple of `pad_to`; the
/// padding is zero, split as evenly as possible with the extra row/column at
/// the bottom/right, and recorded in the sequence's [`Crop`].
pub fn to_sequence(
    v: &Volume,
    labels: Option<&VolumeMask>,
    direction: Direction,
    pad_to: usize,
) -> Result<SliceSequence<f32>> {
    if pad_to == 0 || !pad_to.is_power_of_two() {
        return Err(DataError::Invalid(format!(
            "pad_to must be a power of two, got {pad_to}"
        )));
    }
    let [d, h, w] = v.dims();
    if let Some(m) = labels {
        if m.dims() != v.dims() {
            return Err(DataError::Invalid(format!(
                "label dims {:?} differ from volume dims {:?}",
                m.dims(),
                v.dims()
            )));
        }
    }
    let (hp, wp) = (round_up(h, pad_to), round_up(w, pad_to));
    let crop = Crop {
        top: (hp - h) / 2,
        left: (wp - w) / 2,
        height: h,
        width: w,
    };
    let order: Vec<usize> = match direction {
        Direction::Ascending => (0..d).collect(),
        Direction::Descending => (0..d).rev().collect(),
    };
    let plane = h * w;
    let slices = order
        .iter()
        .map(|&z| Tensor::new([1, 1, hp, wp], pad_plane(v.slice(z), h, w, &crop, hp, wp)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let labels = labels
        .map(|m| {
            order
                .iter()
                .map(|&z| {
                    let src: Vec<f32> = m.voxels()[z * plane..(z + 1) * plane]
                        .iter()
                        .map(|&b| f32::from(b))
                        .collect();
                    Tensor::new([1, 1, hp, wp], pad_plane(&src, h, w, &crop, hp, wp))
                })
                .collect::<std::result::Result<Vec<_>, _>>()
        })
        .transpose()?;
    Ok(SliceSequence::new(slices, labels, v.spacing(), direction, crop)?)
}
