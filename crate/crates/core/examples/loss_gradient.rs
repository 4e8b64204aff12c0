//! The combined BCE + Dice loss on the tape next to its closed-form
//! gradient, for a handful of pixels.
//!
//! cargo run --release --example loss_gradient

use rseg::autodiff::Tape;
use rseg::loss::{combined_loss, grad_loss_wrt_pred, LossWeights};
use rseg::tensor::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pred = Tensor::<f64>::from_f64([1, 1, 2, 3], &[0.9, 0.2, 0.6, 0.05, 0.5, 0.99])?;
    let target = Tensor::<f64>::from_f64([1, 1, 2, 3], &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0])?;
    let w = LossWeights::new(0.5, 0.5)?;

    let mut tape = Tape::new();
    let p = tape.param(pred.clone());
    let y = tape.constant(target.clone());
    let loss = combined_loss(&mut tape, p, y, w, 0.0)?;
    let grads = tape.backward(loss)?;
    let closed = grad_loss_wrt_pred(&pred, &target, w, 0.0)?;

    println!("loss {:.6}", tape.value(loss).item());
    println!("{:>6} {:>3} {:>14} {:>14}", "p", "y", "tape", "closed form");
    for i in 0..pred.len() {
        println!(
            "{:6.2} {:3} {:14.8} {:14.8}",
            pred.data()[i],
            target.data()[i],
            grads.get(p).unwrap().data()[i],
            closed.data()[i]
        );
    }
    Ok(())
}
