//! Generates a few synthetic phantoms, writes them as MVF1 files and reads
//! them back.
//!
//! cargo run --release --example phantoms [out_dir]

use rseg::data::{generate_set, load_intensities, load_mask, save_volume, PhantomSpec, VolumeFile};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "phantoms".into());
    std::fs::create_dir_all(&dir)?;
    let spec = PhantomSpec {
        dims: [16, 48, 48],
        decoys: true,
        artifact_streaks: true,
        seed: 3,
        ..PhantomSpec::default()
    };
    for (i, (vol, mask)) in generate_set(&spec, 3)?.into_iter().enumerate() {
        let img = format!("{dir}/phantom_{i:03}.img.mvf");
        let msk = format!("{dir}/phantom_{i:03}.mask.mvf");
        save_volume(&VolumeFile::Volume(vol.clone()), &img)?;
        save_volume(&VolumeFile::Mask(mask.clone()), &msk)?;
        assert_eq!(load_intensities(&img)?, vol);
        assert_eq!(load_mask(&msk)?, mask);

        let (lo, hi) = vol
            .data()
            .iter()
            .fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let per_slice: Vec<usize> = (0..vol.dims()[0])
            .map(|z| (0..48 * 48).filter(|&j| mask.voxels()[z * 48 * 48 + j] != 0).count())
            .collect();
        println!(
            "{img}: dims {:?}, intensity [{lo:.0}, {hi:.0}], {} object voxels",
            vol.dims(),
            mask.count()
        );
        println!("  object voxels per slice {per_slice:?}");
    }
    Ok(())
}
