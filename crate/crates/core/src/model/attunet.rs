//! Attention Unet: the SegUnet encoder, a nearest-neighbour up-sampling
//! decoder, and additive attention gates on every skip connection.

use super::{ModelConfig, ModelError, Result, Session, POINT, SAME3};
use crate::autodiff::Var;
use crate::tensor::Scalar;

/// Additive attention gate under parameter prefix `prefix`
/// (`{prefix}.wg`, `{prefix}.wx`, `{prefix}.psi`).
///
/// `alpha = sigmoid(psi(relu(wg * g + wx * x_skip)))` per pixel, and the
/// output is `x_skip * alpha` broadcast over channels. `g` may be at the
/// skip's resolution or half of it; the coarser map is nearest-upsampled
/// after its 1x1 projection. Returns `(gated skip, alpha)`.
pub fn attention_gate<T: Scalar>(sess: &mut Session<T>, prefix: &str, g: Var, x_skip: Var) -> Result<(Var, Var)> {
    let (_, _, gh, gw) = sess.tape.value(g).dims4("attention gate")?;
    let (_, _, xh, xw) = sess.tape.value(x_skip).dims4("attention gate")?;
    let mut pg = sess.conv(&format!("{prefix}.wg"), g, POINT)?;
    if (gh, gw) != (xh, xw) {
        if (2 * gh, 2 * gw) != (xh, xw) {
            return Err(ModelError::Config(format!(
                "gating signal {gh}x{gw} cannot be resampled onto skip {xh}x{xw}"
            )));
        }
        pg = sess.tape.upsample_nearest2x(pg)?;
    }
    let px = sess.conv(&format!("{prefix}.wx"), x_skip, POINT)?;
    let sum = sess.tape.add(pg, px)?;
    let act = sess.tape.relu(sum)?;
    let psi = sess.conv(&format!("{prefix}.psi"), act, POINT)?;
    let alpha = sess.tape.sigmoid(psi)?;
    let out = sess.tape.mul_channels(x_skip, alpha)?;
    Ok((out, alpha))
}

pub fn forward_attunet<T: Scalar>(sess: &mut Session<T>, config: &ModelConfig, x: Var) -> Result<Var> {
    let mut skips = Vec::with_capacity(config.levels);
    let mut h = x;
    for lvl in 0..config.levels {
        let a = sess.conv_bn_relu(&format!("enc{lvl}.conv1"), &format!("enc{lvl}.bn1"), h, SAME3)?;
        let s = sess.conv_bn_relu(&format!("enc{lvl}.conv2"), &format!("enc{lvl}.bn2"), a, SAME3)?;
        skips.push(s);
        h = sess.tape.maxpool2d(s)?.0;
    }
    for lvl in (0..config.levels).rev() {
        let up = sess.tape.upsample_nearest2x(h)?;
        let g = sess.conv_bn_relu(&format!("dec{lvl}.up_conv"), &format!("dec{lvl}.bn_up"), up, SAME3)?;
        let (gated, alpha) = attention_gate(sess, &format!("dec{lvl}.gate"), g, skips[lvl])?;
        sess.record(format!("alpha{lvl}"), alpha);
        let cat = sess.tape.concat_channels(g, gated)?;
        h = sess.conv_bn_relu(&format!("dec{lvl}.conv"), &format!("dec{lvl}.bn"), cat, SAME3)?;
    }
    sess.conv("head", h, POINT)
}
