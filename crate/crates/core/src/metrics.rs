//! Volumetric overlap and surface-distance metrics.
//!
//! Surfaces are the centres of foreground voxels with at least one background
//! 6-neighbour (outside the volume counts as background), in millimetres.
//! Nearest-neighbour queries go through a kd-tree that returns exactly the
//! minimum a brute-force scan would: both compare the same squared distances
//! and take one square root at the end.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{write_atomic, VolumeMask};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mask dims {a:?} and {b:?} differ")]
    Dims { a: [usize; 3], b: [usize; 3] },
    #[error("mask spacings {a:?} and {b:?} differ")]
    Spacing { a: [f32; 3], b: [f32; 3] },
    #[error("distance metric undefined: {0}")]
    Undefined(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

pub type Point = [f64; 3];

fn check_dims(a: &VolumeMask, b: &VolumeMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(MetricsError::Dims {
            a: a.dims(),
            b: b.dims(),
        });
    }
    Ok(())
}

/// `2|A and B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice_coefficient(a: &VolumeMask, b: &VolumeMask) -> Result<f64> {
    check_dims(a, b)?;
    let (mut inter, mut na, mut nb) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.voxels().iter().zip(b.voxels()) {
        let (x, y) = (u64::from(x), u64::from(y));
        inter += x & y;
        na += x;
        nb += y;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok((2 * inter) as f64 / (na + nb) as f64)
}

/// Boundary voxel centres in mm, `(z, y, x)`, in row-major voxel order.
pub fn extract_surface(m: &VolumeMask) -> Result<Vec<Point>> {
    let [d, h, w] = m.dims();
    let sp = m.spacing().map(f64::from);
    let fg = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && m.get(z as usize, y as usize, x as usize)
    };
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !m.get(z, y, x) {
                    continue;
                }
                let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                let interior = fg(zi - 1, yi, xi)
                    && fg(zi + 1, yi, xi)
                    && fg(zi, yi - 1, xi)
                    && fg(zi, yi + 1, xi)
                    && fg(zi, yi, xi - 1)
                    && fg(zi, yi, xi + 1);
                if !interior {
                    out.push([z as f64 * sp[0], y as f64 * sp[1], x as f64 * sp[2]]);
                }
            }
        }
    }
    if out.is_empty() {
        return Err(MetricsError::Undefined("empty mask has no surface"));
    }
    Ok(out)
}

#[inline]
pub(crate) fn sq_dist(a: &Point, b: &Point) -> f64 {
    let (dz, dy, dx) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dz * dz + dy * dy + dx * dx
}

/// Static 3-D kd-tree over a point set.
pub struct KdTree {
    points: Vec<Point>,
    nodes: Vec<KdNode>,
}

#[derive(Clone, Copy)]
struct KdNode {
    point: usize,
    axis: u8,
    left: u32,
    right: u32,
}

const NIL: u32 = u32::MAX;

impl KdTree {
    pub fn new(points: &[Point]) -> Self {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        let mut tree = Self {
            points: points.to_vec(),
            nodes: Vec::with_capacity(points.len()),
        };
        tree.build(&mut idx);
        tree
    }

    fn build(&mut self, idx: &mut [usize]) -> u32 {
        if idx.is_empty() {
            return NIL;
        }
        let pts = &self.points;
        let axis = (0..3)
            .max_by(|&a, &b| {
                let spread = |k: usize| {
                    let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                        (lo.min(pts[i][k]), hi.max(pts[i][k]))
                    });
                    hi - lo
                };
                spread(a).total_cmp(&spread(b))
            })
            .expect("three axes");
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        let me = self.nodes.len();
        self.nodes.push(KdNode {
            point: idx[mid],
            axis: axis as u8,
            left: NIL,
            right: NIL,
        });
        let (lo, rest) = idx.split_at_mut(mid);
        let left = self.build(lo);
        let right = self.build(&mut rest[1..]);
        self.nodes[me].left = left;
        self.nodes[me].right = right;
        me as u32
    }

    /// Smallest squared distance from `q` to any point; infinite when empty.
    pub fn nearest_sq(&self, q: &Point) -> f64 {
        let mut best = f64::INFINITY;
        if !self.nodes.is_empty() {
            self.search(0, q, &mut best);
        }
        best
    }

    fn search(&self, node: u32, q: &Point, best: &mut f64) {
        let n = self.nodes[node as usize];
        let p = &self.points[n.point];
        let d = sq_dist(p, q);
        if d < *best {
            *best = d;
        }
        let axis = usize::from(n.axis);
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if near != NIL {
            self.search(near, q, best);
        }
        if far != NIL && diff * diff <= *best {
            self.search(far, q, best);
        }
    }
}

/// Distance from each point of `a` to its nearest point of `b`.
pub fn directed_distances(a: &[Point], b: &[Point]) -> Result<Vec<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::Undefined("empty point set"));
    }
    let tree = KdTree::new(b);
    Ok(a.par_iter().map(|p| tree.nearest_sq(p).sqrt()).collect())
}

/// Mean over `a` of the distance to the nearest point of `b`.
pub fn directed_avg_distance(a: &[Point], b: &[Point]) -> Result<f64> {
    let d = directed_distances(a, b)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// 95th percentile with linear interpolation between closest ranks.
pub fn percentile95(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = 0.95 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 < v.len() {
        v[lo] + frac * (v[lo + 1] - v[lo])
    } else {
        v[lo]
    }
}

/// Surface distances in both directions, computed once and shared by all
/// distance metrics.
struct Directed {
    ab: Vec<f64>,
    ba: Vec<f64>,
}

impl Directed {
    fn new(a: &VolumeMask, b: &VolumeMask) -> Result<Self> {
        check_dims(a, b)?;
        let (sa, sb) = (extract_surface(a)?, extract_surface(b)?);
        Ok(Self {
            ab: directed_distances(&sa, &sb)?,
            ba: directed_distances(&sb, &sa)?,
        })
    }

    fn asd(&self) -> f64 {
        let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
        (mean(&self.ab) + mean(&self.ba)) / 2.0
    }

    fn hd(&self) -> f64 {
        let max = |d: &[f64]| d.iter().copied().fold(0.0, f64::max);
        max(&self.ab).max(max(&self.ba))
    }

    fn hd95(&self) -> f64 {
        percentile95(&self.ab).max(percentile95(&self.ba))
    }
}

/// Average symmetric surface distance in mm.
pub fn asd(a: &VolumeMask, b: &VolumeMask) -> Result<f64> {
    Ok(Directed::new(a, b)?.asd())
}

/// Hausdorff distance in mm.
pub fn hausdorff(a: &VolumeMask, b: &VolumeMask) -> Result<f64> {
    Ok(Directed::new(a, b)?.hd())
}

/// Larger of the two directed 95th-percentile surface distances, in mm.
pub fn hd95(a: &VolumeMask, b: &VolumeMask) -> Result<f64> {
    Ok(Directed::new(a, b)?.hd95())
}

/// One row of an evaluation report. Distances are `None` when either mask is
/// empty, since they are undefined there.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub scan_id: String,
    pub dice: f64,
    pub asd_mm: Option<f64>,
    pub hd95_mm: Option<f64>,
    pub hd_mm: Option<f64>,
}

pub fn evaluate(pred: &VolumeMask, gt: &VolumeMask, scan_id: impl Into<String>) -> Result<MetricsReport> {
    check_dims(pred, gt)?;
    if pred.spacing() != gt.spacing() {
        return Err(MetricsError::Spacing {
            a: pred.spacing(),
            b: gt.spacing(),
        });
    }
    let dice = dice_coefficient(pred, gt)?;
    let (asd_mm, hd95_mm, hd_mm) = if pred.is_empty() || gt.is_empty() {
        (None, None, None)
    } else {
        let d = Directed::new(pred, gt)?;
        (Some(d.asd()), Some(d.hd95()), Some(d.hd()))
    };
    Ok(MetricsReport {
        scan_id: scan_id.into(),
        dice,
        asd_mm,
        hd95_mm,
        hd_mm,
    })
}

pub const CSV_HEADER: &str = "scan_id,dice,asd_mm,hd95_mm,hd_mm";

/// CSV with six decimals; undefined distances are written as `nan`.
pub fn to_csv(reports: &[MetricsReport]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
    let mut out = format!("{CSV_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{:.6},{},{},{}",
            r.scan_id,
            r.dice,
            cell(r.asd_mm),
            cell(r.hd95_mm),
            cell(r.hd_mm)
        );
    }
    out
}

pub fn write_csv(reports: &[MetricsReport], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), to_csv(reports).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: [usize; 3], on: &[[usize; 3]]) -> VolumeMask {
        VolumeMask::from_fn(dims, [1.0; 3], |z, y, x| on.contains(&[z, y, x])).unwrap()
    }

    #[test]
    fn dice_cases() {
        let a = VolumeMask::from_fn([1, 4, 4], [1.0; 3], |_, y, x| y < 2 && x < 2).unwrap();
        let b = VolumeMask::from_fn([1, 4, 4], [1.0; 3], |_, y, x| y < 2 && (1..3).contains(&x)).unwrap();
        assert_eq!(dice_coefficient(&a, &b).unwrap(), 0.5);
        assert_eq!(dice_coefficient(&a, &a).unwrap(), 1.0);
        let e = VolumeMask::empty([1, 4, 4], [1.0; 3]).unwrap();
        assert_eq!(dice_coefficient(&e, &e).unwrap(), 1.0);
        assert_eq!(dice_coefficient(&e, &a).unwrap(), 0.0);
    }

    #[test]
    fn surface_of_cube() {
        let cube = VolumeMask::from_fn([5, 5, 5], [1.0; 3], |z, y, x| {
            (1..4).contains(&z) && (1..4).contains(&y) && (1..4).contains(&x)
        })
        .unwrap();
        assert_eq!(extract_surface(&cube).unwrap().len(), 26);
        let one = mask([3, 3, 3], &[[1, 1, 1]]);
        assert_eq!(extract_surface(&one).unwrap(), vec![[1.0, 1.0, 1.0]]);
        assert!(extract_surface(&VolumeMask::empty([2, 2, 2], [1.0; 3]).unwrap()).is_err());
    }

    #[test]
    fn single_voxels_three_apart() {
        let a = mask([4, 1, 1], &[[0, 0, 0]]);
        let b = mask([4, 1, 1], &[[3, 0, 0]]);
        assert_eq!(asd(&a, &b).unwrap(), 3.0);
        assert_eq!(hausdorff(&a, &b).unwrap(), 3.0);
        assert_eq!(hd95(&a, &b).unwrap(), 3.0);
    }

    #[test]
    fn directed_asymmetry() {
        let a = [[0.0, 0.0, 0.0]];
        let b = [[0.0, 0.0, 0.0], [0.0, 0.0, 10.0]];
        assert_eq!(directed_avg_distance(&a, &b).unwrap(), 0.0);
        assert_eq!(directed_avg_distance(&b, &a).unwrap(), 5.0);
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(percentile95(&v), 95.0);
        assert!((percentile95(&[0.0, 10.0]) - 9.5).abs() < 1e-12);
        assert_eq!(percentile95(&[4.0]), 4.0);
    }

    #[test]
    fn csv_layout() {
        let r = MetricsReport {
            scan_id: "s1".into(),
            dice: 1.0,
            asd_mm: Some(0.0),
            hd95_mm: Some(0.0),
            hd_mm: None,
        };
        assert_eq!(
            to_csv(&[r]),
            "scan_id,dice,asd_mm,hd95_mm,hd_mm\ns1,1.000000,0.000000,0.000000,nan\n"
        );
    }
}
