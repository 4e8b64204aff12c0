//! Trains a small recurrent AttUnet briefly, saves and reloads the
//! checkpoint, then segments an unseen phantom and scores it.
//!
//! cargo run --release --example segment

use rseg::data::{generate_phantom, generate_set, PhantomSpec};
use rseg::metrics::evaluate;
use rseg::model::{build_model, Backbone, ModelConfig};
use rseg::recurrent::{prepare_sequence, segment_volume};
use rseg::train::{load_checkpoint, save_checkpoint, train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = ModelConfig {
        backbone: Backbone::AttUnet,
        levels: 2,
        base_channels: 8,
        recurrent: true,
        ..ModelConfig::default()
    };
    let spec = PhantomSpec {
        dims: [16, 48, 48],
        seed: 21,
        ..PhantomSpec::default()
    };
    let seqs = generate_set(&spec, 6)?
        .iter()
        .map(|(v, m)| prepare_sequence(&config, v, Some(m)))
        .collect::<Result<Vec<_>, _>>()?;
    let (train_set, val_set) = seqs.split_at(5);
    let tc = TrainConfig {
        lr: 3e-3,
        epochs: 8,
        ..TrainConfig::default()
    };
    let mut store = build_model::<f32>(&config, 0)?;
    let history = train(&mut store, &config, &tc, train_set, val_set, |r| {
        println!("epoch {}  val dice {:.4}", r.epoch, r.val_dice);
    })?;
    println!("kept epoch {}", history.best_epoch);

    let path = std::env::temp_dir().join("rseg-example.rsck");
    save_checkpoint(&store, &config, &path)?;
    let (store, config) = load_checkpoint(&path)?;

    let (vol, gt) = generate_phantom(&PhantomSpec { seed: 999, ..spec })?;
    let pred = segment_volume(&store, &config, &vol, 0.5)?;
    let r = evaluate(&pred, &gt, "unseen")?;
    println!(
        "unseen phantom: dice {:.4}, asd {:?} mm, hd95 {:?} mm, hd {:?} mm",
        r.dice, r.asd_mm, r.hd95_mm, r.hd_mm
    );
    Ok(())
}
