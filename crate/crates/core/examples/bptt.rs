//! Gradients of one recurrent sequence under detached and full
//! backpropagation through time. Both see the same forward pass and loss;
//! only full BPTT credits a step's parameters for its effect on later steps.
//!
//! cargo run --release --example bptt

use rseg::data::{generate_phantom, PhantomSpec};
use rseg::model::{build_model, Backbone, ModelConfig};
use rseg::recurrent::{prepare_sequence, BpttMode};
use rseg::train::{sequence_gradients, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = ModelConfig::tiny(Backbone::SegUnet, true);
    let (vol, mask) = generate_phantom(&PhantomSpec {
        dims: [8, 32, 32],
        ..PhantomSpec::default()
    })?;
    let seq = prepare_sequence(&config, &vol, Some(&mask))?.cast::<f64>();
    let store = build_model::<f64>(&config, 1)?;

    let mut runs = Vec::new();
    for bptt in [BpttMode::Detach, BpttMode::Full] {
        let tc = TrainConfig {
            bptt,
            ..TrainConfig::default()
        };
        let (loss, grads) = sequence_gradients(&mut store.clone(), &config, &tc, &seq)?;
        println!("{bptt:6} loss {loss:.6}");
        runs.push(grads);
    }
    println!("{:24} {:>12} {:>12}", "parameter", "|g| detach", "|g| full");
    for (name, g) in &runs[0] {
        let norm = |t: &rseg::tensor::Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("{name:24} {:12.6e} {:12.6e}", norm(g), norm(&runs[1][name]));
    }
    Ok(())
}
