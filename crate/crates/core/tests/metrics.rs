use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rseg::data::VolumeMask;
use rseg::metrics::{asd, dice_coefficient, evaluate, hausdorff, hd95, to_csv, CSV_HEADER};

/// Union of random balls, kept one voxel away from the border when `margin`.
fn blobs(rng: &mut ChaCha8Rng, dims: [usize; 3], spacing: [f32; 3], margin: usize) -> VolumeMask {
    let n = rng.gen_range(1..4);
    let balls: Vec<([f64; 3], f64)> = (0..n)
        .map(|_| {
            let c = dims.map(|d| rng.gen_range(0.0..d as f64));
            (c, rng.gen_range(1.0..(dims[1].min(dims[2]) as f64 / 3.0).max(1.5)))
        })
        .collect();
    VolumeMask::from_fn(dims, spacing, |z, y, x| {
        let inside = [z, y, x].iter().zip(dims).all(|(&i, d)| i >= margin && i + margin < d);
        inside
            && balls.iter().any(|(c, r)| {
                let p = [z as f64, y as f64, x as f64];
                (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>() <= r * r
            })
    })
    .unwrap()
}

/// Independent reference: boundary voxels by explicit neighbour lookup,
/// all-pairs distances, sorted-rank percentile.
struct Brute {
    ab: Vec<f64>,
    ba: Vec<f64>,
}

fn surface(m: &VolumeMask) -> Vec<[f64; 3]> {
    let [d, h, w] = m.dims();
    let s = m.spacing();
    let at = |z: i64, y: i64, x: i64| {
        (0..d as i64).contains(&z) && (0..h as i64).contains(&y) && (0..w as i64).contains(&x) && {
            m.voxels()[(z as usize * h + y as usize) * w + x as usize] != 0
        }
    };
    let mut pts = Vec::new();
    for z in 0..d as i64 {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let nbrs = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if at(z, y, x) && nbrs.iter().any(|(a, b, c)| !at(z + a, y + b, x + c)) {
                    pts.push([
                        z as f64 * f64::from(s[0]),
                        y as f64 * f64::from(s[1]),
                        x as f64 * f64::from(s[2]),
                    ]);
                }
            }
        }
    }
    pts
}

impl Brute {
    fn new(a: &VolumeMask, b: &VolumeMask) -> Self {
        let (sa, sb) = (surface(a), surface(b));
        let directed = |p: &[[f64; 3]], q: &[[f64; 3]]| -> Vec<f64> {
            p.iter()
                .map(|u| {
                    q.iter()
                        .map(|v| ((u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2) + (u[2] - v[2]).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .collect()
        };
        Self {
            ab: directed(&sa, &sb),
            ba: directed(&sb, &sa),
        }
    }

    fn asd(&self) -> f64 {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        0.5 * (mean(&self.ab) + mean(&self.ba))
    }

    fn hd(&self) -> f64 {
        self.ab.iter().chain(&self.ba).copied().fold(0.0, f64::max)
    }

    fn hd95(&self) -> f64 {
        let p95 = |v: &[f64]| {
            let mut s = v.to_vec();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let r = 0.95 * (s.len() - 1) as f64;
            let (lo, hi) = (r.floor() as usize, r.ceil() as usize);
            s[lo] + (r - lo as f64) * (s[hi] - s[lo])
        };
        p95(&self.ab).max(p95(&self.ba))
    }
}

fn brute_dice(a: &VolumeMask, b: &VolumeMask) -> f64 {
    let inter = a
        .voxels()
        .iter()
        .zip(b.voxels())
        .filter(|(x, y)| **x != 0 && **y != 0)
        .count();
    let total = a.count() + b.count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

#[test]
fn metrics_match_brute_force_on_mixed_spacings() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..25 {
        let dims = [rng.gen_range(4..=32), rng.gen_range(4..=32), rng.gen_range(4..=32)];
        let spacing = [
            rng.gen_range(0.3f32..3.0),
            rng.gen_range(0.3f32..3.0),
            rng.gen_range(0.3f32..3.0),
        ];
        let a = blobs(&mut rng, dims, spacing, 0);
        let b = blobs(&mut rng, dims, spacing, 0);
        if a.is_empty() || b.is_empty() {
            continue;
        }
        let r = evaluate(&a, &b, format!("pair{i}")).unwrap();
        let o = Brute::new(&a, &b);
        assert!(close(r.dice, brute_dice(&a, &b), 1e-12), "pair {i} dice");
        assert!(close(r.asd_mm.unwrap(), o.asd(), 1e-9), "pair {i} asd");
        assert!(close(r.hd_mm.unwrap(), o.hd(), 1e-9), "pair {i} hd");
        assert!(close(r.hd95_mm.unwrap(), o.hd95(), 1e-9), "pair {i} hd95");
    }
}

#[test]
fn empty_masks_have_dice_but_no_distances() {
    let e = VolumeMask::empty([4, 4, 4], [1.0; 3]).unwrap();
    let f = VolumeMask::from_fn([4, 4, 4], [1.0; 3], |z, _, _| z == 1).unwrap();
    assert_eq!(dice_coefficient(&e, &e).unwrap(), 1.0);
    assert_eq!(dice_coefficient(&e, &f).unwrap(), 0.0);
    let r = evaluate(&f, &e, "x").unwrap();
    assert_eq!((r.asd_mm, r.hd95_mm, r.hd_mm), (None, None, None));
    assert!(asd(&f, &e).is_err() && hausdorff(&e, &f).is_err() && hd95(&e, &e).is_err());
    assert_eq!(to_csv(&[r]), format!("{CSV_HEADER}\nx,0.000000,nan,nan,nan\n"));
}

#[test]
fn mismatched_inputs_are_rejected() {
    let a = VolumeMask::from_fn([4, 4, 4], [1.0; 3], |z, _, _| z == 1).unwrap();
    let b = VolumeMask::from_fn([4, 4, 5], [1.0; 3], |z, _, _| z == 1).unwrap();
    assert!(dice_coefficient(&a, &b).is_err());
    assert!(evaluate(&a, &a.with_spacing([2.0, 1.0, 1.0]).unwrap(), "s").is_err());
}

fn pair_strategy() -> impl Strategy<Value = (VolumeMask, VolumeMask)> {
    (any::<u64>(), 4usize..12, 0.25f32..2.5).prop_filter_map("empty", |(seed, n, s)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [n, n + 2, n + 1];
        let sp = [s, 1.0, 0.5 * s];
        let a = blobs(&mut rng, dims, sp, 1);
        let b = blobs(&mut rng, dims, sp, 1);
        (!a.is_empty() && !b.is_empty()).then_some((a, b))
    })
}

fn shifted(m: &VolumeMask, by: [usize; 3]) -> VolumeMask {
    let [d, h, w] = m.dims();
    let dims = [d + by[0], h + by[1], w + by[2]];
    VolumeMask::from_fn(dims, m.spacing(), |z, y, x| {
        z >= by[0] && y >= by[1] && x >= by[2] && m.get(z - by[0], y - by[1], x - by[2])
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn metrics_are_symmetric((a, b) in pair_strategy()) {
        let (ab, ba) = (evaluate(&a, &b, "").unwrap(), evaluate(&b, &a, "").unwrap());
        prop_assert_eq!(ab.dice, ba.dice);
        prop_assert!(close(ab.asd_mm.unwrap(), ba.asd_mm.unwrap(), 1e-12));
        prop_assert_eq!(ab.hd_mm, ba.hd_mm);
        prop_assert_eq!(ab.hd95_mm, ba.hd95_mm);
    }

    #[test]
    fn identical_masks_score_perfectly((a, _b) in pair_strategy()) {
        let r = evaluate(&a, &a, "").unwrap();
        prop_assert_eq!(r.dice, 1.0);
        prop_assert_eq!((r.asd_mm, r.hd95_mm, r.hd_mm), (Some(0.0), Some(0.0), Some(0.0)));
    }

    #[test]
    fn distances_are_ordered((a, b) in pair_strategy()) {
        let r = evaluate(&a, &b, "").unwrap();
        let (asd, hd95, hd) = (r.asd_mm.unwrap(), r.hd95_mm.unwrap(), r.hd_mm.unwrap());
        prop_assert!(asd <= hd + 1e-12 && hd95 <= hd + 1e-12);
        prop_assert!((0.0..=1.0).contains(&r.dice));
    }

    #[test]
    fn translation_leaves_metrics_unchanged((a, b) in pair_strategy(), by in prop::array::uniform3(0usize..4)) {
        let (r, s) = (evaluate(&a, &b, "").unwrap(), evaluate(&shifted(&a, by), &shifted(&b, by), "").unwrap());
        prop_assert_eq!(r.dice, s.dice);
        prop_assert!(close(r.asd_mm.unwrap(), s.asd_mm.unwrap(), 1e-9));
        prop_assert!(close(r.hd_mm.unwrap(), s.hd_mm.unwrap(), 1e-9));
        prop_assert!(close(r.hd95_mm.unwrap(), s.hd95_mm.unwrap(), 1e-9));
    }

    #[test]
    fn distances_scale_with_spacing((a, b) in pair_strategy(), k in prop::sample::select(vec![0.5f32, 2.0, 4.0])) {
        let sp = a.spacing().map(|s| s * k);
        let (r, s) = (
            evaluate(&a, &b, "").unwrap(),
            evaluate(&a.with_spacing(sp).unwrap(), &b.with_spacing(sp).unwrap(), "").unwrap(),
        );
        let k = f64::from(k);
        prop_assert_eq!(r.dice, s.dice);
        prop_assert!(close(k * r.asd_mm.unwrap(), s.asd_mm.unwrap(), 1e-6));
        prop_assert!(close(k * r.hd_mm.unwrap(), s.hd_mm.unwrap(), 1e-6));
    }
}
