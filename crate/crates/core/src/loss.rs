//! Binary cross-entropy, soft Dice and their weighted combination.
//!
//! The tape versions are what training differentiates. [`loss_value`] and
//! [`grad_loss_wrt_pred`] evaluate the same quantities directly on tensors,
//! without a tape.

use crate::autodiff::{Tape, Var};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// BCE inputs are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub const BCE_CLAMP: f64 = 1e-7;
/// Default Dice smoothing added to numerator and denominator.
pub const DICE_SMOOTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// BCE weight.
    pub omega1: f64,
    /// Dice weight.
    pub omega2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            omega1: 0.5,
            omega2: 0.5,
        }
    }
}

impl LossWeights {
    pub fn new(omega1: f64, omega2: f64) -> Result<Self> {
        let w = Self { omega1, omega2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !(ok(self.omega1) && ok(self.omega2) && self.omega1 + self.omega2 > 0.0) {
            return Err(TensorError::Invalid(format!(
                "loss weights must be >= 0 with a positive sum, got ({}, {})",
                self.omega1, self.omega2
            )));
        }
        Ok(())
    }
}

fn check_pair<T: Scalar>(op: &'static str, pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    if !target.data().iter().all(|&v| v == T::zero() || v == T::one()) {
        return Err(TensorError::Invalid(format!("{op}: target must be binary")));
    }
    Ok(())
}

/// `-(1/N) sum(y ln p + (1 - y) ln(1 - p))` over all `N` elements.
pub fn bce_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    check_pair("bce_loss", tape.value(pred), tape.value(target))?;
    let n = tape.value(pred).len();
    let eps = T::from_f64_lossy(BCE_CLAMP);
    let p = tape.clamp(pred, eps, T::one() - eps)?;
    let log_p = tape.log(p)?;
    let neg_p = tape.scale(p, -T::one())?;
    let one_minus_p = tape.add_scalar(neg_p, T::one())?;
    let log_q = tape.log(one_minus_p)?;
    let neg_y = tape.scale(target, -T::one())?;
    let one_minus_y = tape.add_scalar(neg_y, T::one())?;
    let pos = tape.mul(target, log_p)?;
    let neg = tape.mul(one_minus_y, log_q)?;
    let both = tape.add(pos, neg)?;
    let total = tape.sum(both)?;
    tape.scale(total, -T::one() / T::from_usize(n).expect("pixel count fits"))
}

/// `1 - (2 sum(y p) + s) / (sum y + sum p + s)`.
pub fn dice_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var, smooth: f64) -> Result<Var> {
    check_pair("dice_loss", tape.value(pred), tape.value(target))?;
    let s = T::from_f64_lossy(smooth);
    let prod = tape.mul(target, pred)?;
    let inter = tape.sum(prod)?;
    let twice = tape.scale(inter, T::from_f64_lossy(2.0))?;
    let num = tape.add_scalar(twice, s)?;
    let sy = tape.sum(target)?;
    let sp = tape.sum(pred)?;
    let total = tape.add(sy, sp)?;
    let den = tape.add_scalar(total, s)?;
    if !(tape.value(den).item() > T::zero()) {
        return Err(TensorError::Invalid(
            "dice_loss: empty prediction and target with zero smoothing".into(),
        ));
    }
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -T::one())?;
    tape.add_scalar(neg, T::one())
}

/// `omega1 * bce + omega2 * dice`.
pub fn combined_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    w: LossWeights,
    smooth: f64,
) -> Result<Var> {
    w.validate()?;
    let bce = bce_loss(tape, pred, target)?;
    let dice = dice_loss(tape, pred, target, smooth)?;
    let a = tape.scale(bce, T::from_f64_lossy(w.omega1))?;
    let b = tape.scale(dice, T::from_f64_lossy(w.omega2))?;
    tape.add(a, b)
}

/// Plain sum of per-step combined losses.
pub fn sequence_loss<T: Scalar>(
    tape: &mut Tape<T>,
    preds: &[Var],
    targets: &[Var],
    w: LossWeights,
    smooth: f64,
) -> Result<Var> {
    if preds.len() != targets.len() {
        return Err(TensorError::Invalid(format!(
            "sequence_loss: {} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Err(TensorError::Invalid("sequence_loss: empty sequence".into()));
    }
    let mut total: Option<Var> = None;
    for (&p, &y) in preds.iter().zip(targets) {
        let l = combined_loss(tape, p, y, w, smooth)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    Ok(total.expect("nonempty"))
}

/// Tape-free value of [`combined_loss`], accumulated in `f64`.
pub fn loss_value<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, w: LossWeights, smooth: f64) -> Result<f64> {
    check_pair("loss_value", pred, target)?;
    w.validate()?;
    let n = pred.len() as f64;
    let (mut bce, mut inter, mut sy, mut sp) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        let (p, y) = (p.to_f64_lossy(), y.to_f64_lossy());
        let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        bce -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        inter += y * p;
        sy += y;
        sp += p;
    }
    let den = sy + sp + smooth;
    if !(den > 0.0) {
        return Err(TensorError::Invalid(
            "loss_value: empty prediction and target with zero smoothing".into(),
        ));
    }
    Ok(w.omega1 * bce / n + w.omega2 * (1.0 - (2.0 * inter + smooth) / den))
}

/// Closed-form `dL/dp` of [`combined_loss`]:
///
/// `-(w1/N)(y/p - (1-y)/(1-p)) - w2 * 2y/(S+s) + w2 * (2I+s)/(S+s)^2`
///
/// with `I = sum(y p)` and `S = sum y + sum p`. The BCE term vanishes where
/// the clamp is active, as it does on the tape.
pub fn grad_loss_wrt_pred<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    w: LossWeights,
    smooth: f64,
) -> Result<Tensor<T>> {
    check_pair("grad_loss_wrt_pred", pred, target)?;
    w.validate()?;
    let eps = T::from_f64_lossy(BCE_CLAMP);
    let hi = T::one() - eps;
    let n = T::from_usize(pred.len()).expect("pixel count fits");
    let (w1, w2) = (T::from_f64_lossy(w.omega1), T::from_f64_lossy(w.omega2));
    let two = T::from_f64_lossy(2.0);
    let s = T::from_f64_lossy(smooth);
    let (mut inter, mut total) = (T::zero(), T::zero());
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        inter = inter + y * p;
        total = total + y + p;
    }
    let den = total + s;
    if !(den > T::zero()) {
        return Err(TensorError::Invalid(
            "grad_loss_wrt_pred: empty prediction and target with zero smoothing".into(),
        ));
    }
    let dice_common = w2 * (two * inter + s) / (den * den);
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            let bce = if p > eps && p < hi {
                -(w1 / n) * (y / p - (T::one() - y) / (T::one() - p))
            } else {
                T::zero()
            };
            bce - w2 * two * y / den + dice_common
        })
        .collect();
    Tensor::new(pred.shape().to_vec(), data)
}
