//! Ready-made checks for every tape op and for whole backbones.
//!
//! Each op is reduced to a scalar as `sum(op(x) * r)` with a fixed random
//! `r`, so every output element carries a distinct upstream gradient.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check, GradCheckReport, Probe};
use crate::autodiff::{BatchNormMode, BatchNormParams, Conv2dGeom, RunningStats, Tape, Var};
use crate::loss::{bce_loss, combined_loss, dice_loss, LossWeights};
use crate::model::{build_model, forward_backbone, ModelConfig, ModelError, Session};
use crate::tensor::{Result, Tensor, TensorError};

/// Result of checking one named op.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

fn binary(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = Tensor::from_fn(shape.to_vec(), |_| f64::from(u8::from(rng.gen_bool(0.4))));
    t.data_mut()[0] = 1.0;
    t
}

/// `sum(y * r)` for a constant `r` of `y`'s shape drawn from `seed`.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = uniform(&mut rng, tape.value(y).shape(), -1.0, 1.0);
    let rv = tape.constant(r);
    let prod = tape.mul(y, rv)?;
    tape.sum(prod)
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Checks every differentiable op with inputs drawn from `seed`.
pub fn check_ops(seed: u64, h: f64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x4 = uniform(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
    let y4 = uniform(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
    let pos = uniform(&mut rng, &[2, 3, 6, 6], 0.5, 2.0);
    let w3 = uniform(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let b4 = uniform(&mut rng, &[4], -0.5, 0.5);
    let wt = uniform(&mut rng, &[3, 4, 2, 2], -0.5, 0.5);
    let gamma = uniform(&mut rng, &[3], 0.5, 1.5);
    let beta = uniform(&mut rng, &[3], -0.5, 0.5);
    let gate = uniform(&mut rng, &[2, 1, 6, 6], 0.1, 0.9);
    let small = uniform(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
    let prob = uniform(&mut rng, &[1, 1, 8, 8], 0.05, 0.95);
    let target = binary(&mut rng, &[1, 1, 8, 8]);
    let running = RunningStats {
        mean: vec![0.1, -0.2, 0.05],
        var: vec![0.8, 1.3, 1.1],
    };
    let bn = BatchNormParams {
        eps: 1e-5,
        momentum: 0.1,
    };

    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($t:expr),*], $f:expr) => {
            cases.push(($name, vec![$($t.clone()),*], Box::new($f)));
        };
    }
    case!("add", [x4, y4], move |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, seed)
    });
    case!("sub", [x4, y4], move |t, v| {
        let y = t.sub(v[0], v[1])?;
        project(t, y, seed)
    });
    case!("mul", [x4, y4], move |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, seed)
    });
    case!("div", [x4, pos], move |t, v| {
        let y = t.div(v[0], v[1])?;
        project(t, y, seed)
    });
    case!("scale", [x4], move |t, v| {
        let y = t.scale(v[0], -1.7)?;
        project(t, y, seed)
    });
    case!("add_scalar", [x4], move |t, v| {
        let y = t.add_scalar(v[0], 0.3)?;
        project(t, y, seed)
    });
    case!("log", [pos], move |t, v| {
        let y = t.log(v[0])?;
        project(t, y, seed)
    });
    case!("clamp", [x4], move |t, v| {
        let y = t.clamp(v[0], -0.5, 0.5)?;
        project(t, y, seed)
    });
    case!("relu", [x4], move |t, v| {
        let y = t.relu(v[0])?;
        project(t, y, seed)
    });
    case!("sigmoid", [x4], move |t, v| {
        let y = t.sigmoid(v[0])?;
        project(t, y, seed)
    });
    case!("sum", [x4], move |t, v| {
        let y = t.scale(v[0], 1.0)?;
        let s = t.sum(y)?;
        let sq = t.mul(s, s)?;
        Ok(sq)
    });
    case!("conv2d", [x4, w3, b4], move |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], Conv2dGeom::same(3))?;
        project(t, y, seed)
    });
    case!("conv2d_strided", [x4, w3, b4], move |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], Conv2dGeom::new((2, 2), (1, 1)))?;
        project(t, y, seed)
    });
    case!("conv2d_transpose", [small, wt, b4], move |t, v| {
        let y = t.conv2d_transpose(v[0], v[1], v[2], Conv2dGeom::new((2, 2), (0, 0)))?;
        project(t, y, seed)
    });
    case!("maxpool2d", [x4], move |t, v| {
        let (y, _) = t.maxpool2d(v[0])?;
        project(t, y, seed)
    });
    case!("maxunpool2d", [x4, small], move |t, v| {
        let (_, idx): (Var, Arc<_>) = t.maxpool2d(v[0])?;
        let y = t.maxunpool2d(v[1], &idx, [2, 3, 6, 6])?;
        project(t, y, seed)
    });
    case!("upsample_nearest2x", [small], move |t, v| {
        let y = t.upsample_nearest2x(v[0])?;
        project(t, y, seed)
    });
    case!("concat_channels", [x4, y4], move |t, v| {
        let y = t.concat_channels(v[0], v[1])?;
        project(t, y, seed)
    });
    case!("slice_channels", [x4], move |t, v| {
        let y = t.slice_channels(v[0], 1, 2)?;
        project(t, y, seed)
    });
    case!("mul_channels", [x4, gate], move |t, v| {
        let y = t.mul_channels(v[0], v[1])?;
        project(t, y, seed)
    });
    case!("batchnorm2d_train", [x4, gamma, beta], move |t, v| {
        let mut stats = RunningStats::fresh(3);
        let y = t.batchnorm2d(v[0], v[1], v[2], &mut stats, BatchNormMode::Train, bn)?;
        project(t, y, seed)
    });
    let eval_stats = running.clone();
    case!("batchnorm2d_eval", [x4, gamma, beta], move |t, v| {
        let mut stats = eval_stats.clone();
        let y = t.batchnorm2d(v[0], v[1], v[2], &mut stats, BatchNormMode::Eval, bn)?;
        project(t, y, seed)
    });
    let tgt = target.clone();
    case!("bce_loss", [prob], move |t, v| {
        let y = t.constant(tgt.clone());
        bce_loss(t, v[0], y)
    });
    let tgt = target.clone();
    case!("dice_loss", [prob], move |t, v| {
        let y = t.constant(tgt.clone());
        dice_loss(t, v[0], y, 1e-6)
    });
    let tgt = target;
    case!("combined_loss", [prob], move |t, v| {
        let y = t.constant(tgt.clone());
        combined_loss(t, v[0], y, LossWeights::default(), 1e-6)
    });

    cases
        .into_iter()
        .map(|(name, inputs, f)| {
            let report = check(&inputs, h, Probe::All, |t, v| f(t, v))?;
            Ok(OpCheck { name, report })
        })
        .collect()
}

/// End-to-end check of one backbone: parameters and input are perturbed,
/// the network runs in train mode, and the scalar is the combined loss of
/// its sigmoid output against a random binary target. `extent` is the
/// input's height and width; at most `per_tensor` elements of each tensor
/// are probed.
pub fn check_backbone(
    config: &ModelConfig,
    seed: u64,
    extent: usize,
    h: f64,
    per_tensor: usize,
) -> Result<GradCheckReport, ModelError> {
    let store = build_model::<f64>(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let shape = [1, config.in_channels(), extent, extent];
    let x = uniform(&mut rng, &shape, 0.0, 1.0);
    let target = binary(&mut rng, &[1, 1, extent, extent]);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut inputs = vec![x];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));

    let run = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let bound = std::mem::replace(tape, Tape::new());
        let mut sess = Session::from_tape(
            bound,
            names.iter().cloned().zip(vars[1..].iter().copied()),
            &store,
            config,
            BatchNormMode::Train,
        );
        let out = forward_backbone(&mut sess, config, vars[0]);
        let mut t = sess.into_tape();
        let logits = out.map_err(|e| match e {
            ModelError::Tensor(t) => t,
            other => TensorError::Invalid(other.to_string()),
        })?;
        let p = t.sigmoid(logits)?;
        let y = t.constant(target.clone());
        let loss = combined_loss(&mut t, p, y, LossWeights::default(), 1e-6);
        *tape = t;
        loss
    };
    Ok(check(&inputs, h, Probe::Strided(per_tensor), run)?)
}
