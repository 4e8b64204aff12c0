//! Parameter counts and output shapes of the three backbones, with and
//! without the recurrent input channel.
//!
//! cargo run --release --example backbones

use rseg::autodiff::BatchNormMode;
use rseg::model::{build_model, predict_logits, Backbone, ModelConfig};
use rseg::tensor::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for backbone in Backbone::ALL {
        for recurrent in [false, true] {
            let config = ModelConfig {
                backbone,
                recurrent,
                ..ModelConfig::default()
            };
            let store = build_model::<f32>(&config, 0)?;
            let x = Tensor::<f32>::from_fn([1, config.in_channels(), 64, 64], |i| (i % 13) as f32 / 13.0);
            let y = predict_logits(&store, &config, &x, BatchNormMode::Eval)?;
            println!(
                "{backbone:8} recurrent={recurrent:5} {:>9} parameters in {:3} tensors, {:?} -> {:?}",
                store.num_scalars(),
                store.len(),
                x.shape(),
                y.shape()
            );
        }
    }
    Ok(())
}
