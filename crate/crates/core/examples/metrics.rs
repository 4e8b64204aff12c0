//! Scores a phantom mask against eroded, shifted and empty versions of itself
//! and writes the report as CSV.
//!
//! cargo run --release --example metrics

use rseg::data::{generate_phantom, PhantomSpec, VolumeMask};
use rseg::metrics::{evaluate, to_csv};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (_, gt) = generate_phantom(&PhantomSpec::default())?;
    let [d, h, w] = gt.dims();

    let eroded = VolumeMask::from_fn(gt.dims(), gt.spacing(), |z, y, x| {
        gt.get(z, y, x)
            && y > 0
            && x > 0
            && y + 1 < h
            && x + 1 < w
            && gt.get(z, y - 1, x)
            && gt.get(z, y + 1, x)
            && gt.get(z, y, x - 1)
            && gt.get(z, y, x + 1)
    })?;
    let shifted = VolumeMask::from_fn(gt.dims(), gt.spacing(), |z, y, x| x >= 3 && gt.get(z, y, x - 3))?;
    let empty = VolumeMask::empty([d, h, w], gt.spacing())?;

    let reports = vec![
        evaluate(&gt, &gt, "identical")?,
        evaluate(&eroded, &gt, "eroded")?,
        evaluate(&shifted, &gt, "shifted_3px")?,
        evaluate(&empty, &gt, "empty")?,
    ];
    print!("{}", to_csv(&reports));
    Ok(())
}
