use rseg::data::{
    generate_phantom, load_intensities, load_mask, load_volume, phantom_seeds, save_volume, DataError, PhantomSpec,
    Volume, VolumeFile, VolumeMask, MVF_HEADER_LEN,
};
use rseg::model::{build_model, Backbone, ModelConfig};
use rseg::train::{checkpoint_to_bytes, load_checkpoint, save_checkpoint};

#[test]
fn phantoms_are_frozen() {
    let golden: [(bool, u64, usize, f64); 8] = [
        (false, 0, 6371, 10768775.798),
        (false, 1, 6246, 10593724.032),
        (false, 2, 6405, 10826909.140),
        (false, 3, 6524, 10999088.379),
        (true, 0, 1690, 5316749.881),
        (true, 1, 1545, 5478125.714),
        (true, 2, 1564, 6577767.774),
        (true, 3, 1500, 5795685.866),
    ];
    for (decoys, seed, count, sum) in golden {
        let spec = PhantomSpec {
            seed,
            decoys,
            artifact_streaks: decoys,
            ..PhantomSpec::default()
        };
        let (v, m) = generate_phantom(&spec).unwrap();
        assert_eq!(m.count(), count, "seed {seed} decoys {decoys}");
        let got: f64 = v.data().iter().map(|&x| f64::from(x)).sum();
        assert!((got - sum).abs() <= 1e-6 * sum, "seed {seed}: intensity sum {got}");
    }
    assert_eq!(
        phantom_seeds(0, 3),
        [13080132717333068652, 8594738769458413623, 12896916468484187878]
    );
    assert_eq!(phantom_seeds(0, 5)[..3], phantom_seeds(0, 3)[..]);
}

#[test]
fn volumes_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let (v, m) = generate_phantom(&PhantomSpec {
        dims: [8, 32, 40],
        spacing: [2.5, 0.7, 0.7],
        ..PhantomSpec::default()
    })
    .unwrap();
    let (vp, mp) = (dir.path().join("v.mvf"), dir.path().join("m.mvf"));
    save_volume(&VolumeFile::Volume(v.clone()), &vp).unwrap();
    save_volume(&VolumeFile::Mask(m.clone()), &mp).unwrap();
    assert_eq!(load_intensities(&vp).unwrap(), v);
    assert_eq!(load_mask(&mp).unwrap(), m);
    assert_eq!(
        std::fs::metadata(&vp).unwrap().len() as usize,
        MVF_HEADER_LEN + 4 * 8 * 32 * 40
    );
    assert_eq!(
        std::fs::metadata(&mp).unwrap().len() as usize,
        MVF_HEADER_LEN + 8 * 32 * 40
    );
    // Loading the wrong kind is an error, not a silent conversion.
    assert!(load_mask(&vp).is_err());
    assert!(load_intensities(&mp).is_err());
    assert!(matches!(load_volume(&mp).unwrap(), VolumeFile::Mask(_)));
}

#[test]
fn corrupt_volumes_are_rejected() {
    let m = VolumeMask::from_fn([2, 3, 4], [1.0; 3], |z, y, x| (z + y + x) % 2 == 0).unwrap();
    let bytes = VolumeFile::Mask(m).to_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[1] = b'Q';
    assert!(matches!(VolumeFile::from_bytes(&bad), Err(DataError::BadMagic { .. })));
    assert!(matches!(
        VolumeFile::from_bytes(&bytes[..bytes.len() - 1]),
        Err(DataError::Truncated { .. })
    ));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(VolumeFile::from_bytes(&extra).is_err());
    let mut tag = bytes.clone();
    tag[4] = 9;
    assert!(VolumeFile::from_bytes(&tag).is_err());
    let mut nonbinary = bytes;
    *nonbinary.last_mut().unwrap() = 7;
    assert!(VolumeFile::from_bytes(&nonbinary).is_err());
    assert!(Volume::new([2, 2, 2], vec![0.0; 7], [1.0; 3]).is_err());
    assert!(Volume::new([2, 2, 2], vec![0.0; 8], [0.0, 1.0, 1.0]).is_err());
}

#[test]
fn checkpoints_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    for backbone in Backbone::ALL {
        for recurrent in [false, true] {
            let cfg = ModelConfig {
                backbone,
                recurrent,
                levels: 3,
                base_channels: 6,
                window: (-100.0, 900.0),
                ..ModelConfig::default()
            };
            let store = build_model::<f32>(&cfg, 77).unwrap();
            let path = dir.path().join(format!("{backbone}-{recurrent}.rsck"));
            save_checkpoint(&store, &cfg, &path).unwrap();
            let (loaded, lcfg) = load_checkpoint(&path).unwrap();
            assert_eq!((&loaded, &lcfg), (&store, &cfg));
            assert_eq!(
                std::fs::read(&path).unwrap(),
                checkpoint_to_bytes(&loaded, &lcfg).unwrap()
            );
        }
    }
    assert!(load_checkpoint(dir.path().join("missing.rsck")).is_err());
}
