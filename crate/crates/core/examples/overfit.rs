//! Overfits a small recurrent Unet on four synthetic volumes and prints the
//! per-epoch history. Stops once training Dice reaches 0.95.
//!
//! cargo run --release --example overfit

use std::time::Instant;

use rseg::data::{generate_set, PhantomSpec};
use rseg::model::{build_model, Backbone, ModelConfig};
use rseg::recurrent::prepare_sequence;
use rseg::train::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = ModelConfig {
        backbone: Backbone::Unet,
        levels: 2,
        base_channels: 8,
        recurrent: true,
        ..ModelConfig::default()
    };
    let spec = PhantomSpec {
        dims: [16, 48, 48],
        seed: 7,
        ..PhantomSpec::default()
    };
    let seqs = generate_set(&spec, 4)?
        .iter()
        .map(|(v, m)| prepare_sequence(&config, v, Some(m)))
        .collect::<Result<Vec<_>, _>>()?;
    let tc = TrainConfig {
        lr: 3e-3,
        epochs: 200,
        patience: 200,
        target_dice: Some(0.95),
        seed: 7,
        ..TrainConfig::default()
    };
    let mut store = build_model::<f32>(&config, 7)?;
    let start = Instant::now();
    let history = train(&mut store, &config, &tc, &seqs, &seqs, |r| {
        println!(
            "epoch {:3}  train {:.4}  val {:.4}  dice {:.4}  ({:.1}s)",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.val_dice,
            start.elapsed().as_secs_f64()
        );
    })?;
    println!("stopped: {} after {} epochs", history.stop, history.epochs.len());
    Ok(())
}
