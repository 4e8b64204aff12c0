//! The tape on its own: a small conv + batch-norm + ReLU + pooling graph,
//! its gradients, and a finite-difference spot check of one weight.
//!
//! cargo run --release --example autodiff

use rseg::autodiff::{BatchNormMode, BatchNormParams, Conv2dGeom, RunningStats, Tape};
use rseg::tensor::Tensor;

fn forward(
    w: &Tensor<f64>,
    x: &Tensor<f64>,
) -> Result<(Tape<f64>, rseg::autodiff::Var, rseg::autodiff::Var), Box<dyn std::error::Error>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.param(w.clone());
    let b = tape.param(Tensor::zeros([2]));
    let gamma = tape.param(Tensor::ones([2]));
    let beta = tape.param(Tensor::zeros([2]));
    let conv = tape.conv2d(xv, wv, b, Conv2dGeom::same(3))?;
    let mut stats = RunningStats::fresh(2);
    let params = BatchNormParams {
        eps: 1e-5,
        momentum: 0.1,
    };
    let bn = tape.batchnorm2d(conv, gamma, beta, &mut stats, BatchNormMode::Train, params)?;
    let act = tape.relu(bn)?;
    let (pooled, _) = tape.maxpool2d(act)?;
    let sq = tape.mul(pooled, pooled)?;
    let loss = tape.sum(sq)?;
    Ok((tape, wv, loss))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let x = Tensor::<f64>::from_fn([2, 1, 6, 6], |i| ((i * 7919) % 101) as f64 / 50.0 - 1.0);
    let w = Tensor::<f64>::from_fn([2, 1, 3, 3], |i| ((i * 31) % 17) as f64 / 17.0 - 0.5);

    let (tape, wv, loss) = forward(&w, &x)?;
    let grads = tape.backward(loss)?;
    println!("loss {:.6} over {} tape nodes", tape.value(loss).item(), tape.len());
    println!("ops: {}", tape.op_names().collect::<Vec<_>>().join(" -> "));
    let gw = grads.get(wv).unwrap();
    println!(
        "dL/dw {:?}",
        gw.data().iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
    );

    let h = 1e-6;
    let at = |d: f64| -> Result<f64, Box<dyn std::error::Error>> {
        let mut wp = w.clone();
        wp.data_mut()[4] += d;
        let (t, _, l) = forward(&wp, &x)?;
        Ok(t.value(l).item())
    };
    let numeric = (at(h)? - at(-h)?) / (2.0 * h);
    println!("w[4]: tape {:.8}, central difference {:.8}", gw.data()[4], numeric);
    Ok(())
}
