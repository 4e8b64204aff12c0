//! Unet with strided-convolution down-sampling and transposed-convolution up-sampling.

use super::{ModelConfig, Result, Session, DOWN3, POINT, SAME3, UP2};
use crate::autodiff::Var;
use crate::tensor::Scalar;

/// Encoder level: conv3x3/s1 + BN + ReLU (kept as skip), conv3x3/s2 + BN + ReLU.
/// Decoder level: transposed conv2x2/s2 + BN + ReLU, concat(decoder, skip),
/// conv3x3 + BN + ReLU. A 1x1 head produces one logit channel.
pub fn forward_unet<T: Scalar>(sess: &mut Session<T>, config: &ModelConfig, x: Var) -> Result<Var> {
    let mut skips = Vec::with_capacity(config.levels);
    let mut h = x;
    for lvl in 0..config.levels {
        let s = sess.conv_bn_relu(&format!("enc{lvl}.conv1"), &format!("enc{lvl}.bn1"), h, SAME3)?;
        skips.push(s);
        h = sess.conv_bn_relu(&format!("enc{lvl}.conv2"), &format!("enc{lvl}.bn2"), s, DOWN3)?;
    }
    for lvl in (0..config.levels).rev() {
        let up = sess.conv_transpose(&format!("dec{lvl}.up"), h, UP2)?;
        let up = sess.bn(&format!("dec{lvl}.bn_up"), up)?;
        let up = sess.tape.relu(up)?;
        let cat = sess.tape.concat_channels(up, skips[lvl])?;
        h = sess.conv_bn_relu(&format!("dec{lvl}.conv"), &format!("dec{lvl}.bn"), cat, SAME3)?;
    }
    sess.conv("head", h, POINT)
}
