//! Deterministic synthetic CT-like phantoms.
//!
//! The target object is a horseshoe: in every axial slice a thick U-shaped
//! arc whose radius and centre drift smoothly with `z`. With decoys enabled a
//! second, independently parametrized horseshoe of the same intensity occupies
//! the other half of the field of view, starting partway through the stack.
//! In any single slice where both are present the two arcs look alike; only
//! their history across slices tells which one is the object, because the
//! object is present from the first slice on.
//!
//! All randomness comes from a ChaCha8 stream seeded with `seed`: geometry is
//! drawn first, then streaks, then per-voxel noise in row-major order.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::volume::{Volume, VolumeMask};
use super::{DataError, Result};

pub const MIN_DIMS: [usize; 3] = [8, 32, 32];

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    /// `(D, H, W)`.
    pub dims: [usize; 3],
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f32,
    pub decoys: bool,
    pub artifact_streaks: bool,
    pub object_intensity: f32,
    pub decoy_intensity: f32,
    pub background_intensity: f32,
    /// Voxel spacing in mm, `(z, y, x)`.
    pub spacing: [f32; 3],
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [16, 48, 48],
            noise_sigma: 50.0,
            decoys: false,
            artifact_streaks: false,
            object_intensity: 1500.0,
            decoy_intensity: 1500.0,
            background_intensity: 40.0,
            spacing: [1.0, 0.5, 0.5],
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Intensity painted along artifact streaks.
    pub fn streak_intensity(&self) -> f32 {
        self.object_intensity + 0.5 * (self.object_intensity - self.background_intensity).abs()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().zip(MIN_DIMS).any(|(&d, m)| d < m) {
            return Err(DataError::Invalid(format!(
                "phantom dims {:?} too small to fit the arc (minimum {MIN_DIMS:?})",
                self.dims
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(DataError::Invalid(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !self.spacing.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(DataError::Invalid(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        Ok(())
    }
}

/// One swept horseshoe.
#[derive(Debug, Clone)]
struct Horseshoe {
    radius: f64,
    half_thickness: f64,
    cy: f64,
    cx: f64,
    drift: f64,
    freq: [f64; 3],
    phase: [f64; 3],
    first_slice: usize,
}

impl Horseshoe {
    fn draw(rng: &mut ChaCha8Rng, h: usize, x_range: (f64, f64), first_slice: usize) -> Self {
        let side = (h as f64).min(x_range.1 - x_range.0);
        let radius = 0.28 * side;
        let half_thickness = (0.07 * side).max(1.5);
        let drift = 0.06 * side;
        let reach = radius * 1.15 + half_thickness + drift + 1.0;
        let pick = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
            if hi > lo {
                rng.gen_range(lo..hi)
            } else {
                0.5 * (lo + hi)
            }
        };
        // The arc hangs below its centre and its arms rise ~0.6 R above it.
        let cy = pick(rng, 0.6 * reach, h as f64 - reach);
        let cx = pick(rng, x_range.0 + reach, x_range.1 - reach);
        let mut freq = [0.0; 3];
        let mut phase = [0.0; 3];
        for k in 0..3 {
            freq[k] = rng.gen_range(0.5..1.0);
            phase[k] = rng.gen_range(0.0..2.0 * PI);
        }
        Self {
            radius,
            half_thickness,
            cy,
            cx,
            drift,
            freq,
            phase,
            first_slice,
        }
    }

    /// `(radius, cy, cx)` at normalized depth `u` in `[0, 1]`.
    fn at(&self, u: f64) -> (f64, f64, f64) {
        let wave = |k: usize| (2.0 * PI * self.freq[k] * u + self.phase[k]).sin();
        (
            self.radius * (1.0 + 0.15 * wave(0)),
            self.cy + self.drift * wave(1),
            self.cx + self.drift * wave(2),
        )
    }

    fn contains(&self, z: usize, u: f64, y: usize, x: usize) -> bool {
        if z < self.first_slice {
            return false;
        }
        let (r, cy, cx) = self.at(u);
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let dist = (dy * dy + dx * dx).sqrt();
        if (dist - r).abs() > self.half_thickness {
            return false;
        }
        // Opening faces -y: keep everything except a 0.6 pi wedge above the centre.
        let ang = dy.atan2(dx);
        !(-0.8 * PI < ang && ang < -0.2 * PI)
    }
}

/// Per-volume seeds for a set of `count` phantoms drawn from `base`: the
/// first `count` outputs of a ChaCha8 stream seeded with `base`.
pub fn phantom_seeds(base: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    (0..count).map(|_| rng.gen()).collect()
}

/// `count` phantoms sharing `spec` except for their seeds, which come from
/// [`phantom_seeds`] with `spec.seed` as the base.
pub fn generate_set(spec: &PhantomSpec, count: usize) -> Result<Vec<(Volume, VolumeMask)>> {
    phantom_seeds(spec.seed, count)
        .into_iter()
        .map(|seed| generate_phantom(&PhantomSpec { seed, ..spec.clone() }))
        .collect()
}

/// Generates `(volume, mask)`; the mask covers the object only.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, VolumeMask)> {
    spec.validate()?;
    let [d, h, w] = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let (object, decoy) = if spec.decoys {
        let half = w as f64 / 2.0;
        let left_is_object = rng.gen_bool(0.5);
        let (obj_range, dec_range) = if left_is_object {
            ((0.0, half), (half, w as f64))
        } else {
            ((half, w as f64), (0.0, half))
        };
        let object = Horseshoe::draw(&mut rng, h, obj_range, 0);
        let start = rng.gen_range(d / 4..=d / 2);
        let decoy = Horseshoe::draw(&mut rng, h, dec_range, start);
        (object, Some(decoy))
    } else {
        (Horseshoe::draw(&mut rng, h, (0.0, w as f64), 0), None)
    };

    let plane = h * w;
    let mut data = vec![spec.background_intensity; d * plane];
    let mut mask = vec![0u8; d * plane];
    let mut decoy_mask = vec![false; d * plane];
    for z in 0..d {
        let u = z as f64 / (d - 1) as f64;
        for y in 0..h {
            for x in 0..w {
                let i = z * plane + y * w + x;
                if object.contains(z, u, y, x) {
                    data[i] = spec.object_intensity;
                    mask[i] = 1;
                } else if decoy.as_ref().is_some_and(|dc| dc.contains(z, u, y, x)) {
                    data[i] = spec.decoy_intensity;
                    decoy_mask[i] = true;
                }
            }
        }
    }

    if spec.artifact_streaks {
        let value = spec.streak_intensity();
        for z in 0..d {
            if !rng.gen_bool(0.3) {
                continue;
            }
            let chords = rng.gen_range(1..=2);
            for _ in 0..chords {
                // Chord through a random interior point at a random angle.
                let (py, px) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
                let theta: f64 = rng.gen_range(0.0..PI);
                let (sy, sx) = theta.sin_cos();
                for y in 0..h {
                    for x in 0..w {
                        let dist = ((y as f64 - py) * sx - (x as f64 - px) * sy).abs();
                        let i = z * plane + y * w + x;
                        if dist <= 0.5 && mask[i] == 0 && !decoy_mask[i] {
                            data[i] = value;
                        }
                    }
                }
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let sigma = f64::from(spec.noise_sigma);
        for v in &mut data {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += (z * sigma) as f32;
        }
    }

    Ok((
        Volume::new(spec.dims, data, spec.spacing)?,
        VolumeMask::new(spec.dims, mask, spec.spacing)?,
    ))
}
