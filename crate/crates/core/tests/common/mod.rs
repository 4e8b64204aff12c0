#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rseg::data::Direction;
use rseg::gradcheck::rel_error;
use rseg::recurrent::{Crop, SliceSequence};
use rseg::tensor::{Scalar, Tensor};

/// Random `len`-slice sequence of `extent x extent` slices with a blob-like
/// binary label per slice.
pub fn random_sequence<T: Scalar>(seed: u64, len: usize, extent: usize) -> SliceSequence<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [1, 1, extent, extent];
    let mut slices = Vec::new();
    let mut labels = Vec::new();
    for t in 0..len {
        let c = extent as f64 / 2.0 + t as f64 * 0.5;
        let lab: Vec<f64> = (0..extent * extent)
            .map(|i| {
                let (y, x) = ((i / extent) as f64, (i % extent) as f64);
                f64::from(((y - c).powi(2) + (x - c).powi(2)).sqrt() < extent as f64 / 4.0)
            })
            .collect();
        let img: Vec<f64> = lab.iter().map(|&l| 0.7 * l + rng.gen_range(-0.3..0.3)).collect();
        slices.push(Tensor::from_f64(shape, &img).unwrap());
        labels.push(Tensor::from_f64(shape, &lab).unwrap());
    }
    let crop = Crop {
        top: 0,
        left: 0,
        height: extent,
        width: extent,
    };
    SliceSequence::new(slices, Some(labels), [1.0, 1.0, 1.0], Direction::Ascending, crop).unwrap()
}

pub fn assert_close(analytic: f64, numeric: f64, tol: f64, what: &str) {
    let e = rel_error(analytic, numeric);
    assert!(e <= tol, "{what}: analytic {analytic:e} numeric {numeric:e} rel {e:e}");
}
