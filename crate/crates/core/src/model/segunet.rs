//! SegUnet: max pooling with recorded indices in the encoder, index-guided
//! unpooling plus skip concatenation in the decoder.

use super::{ModelConfig, Result, Session, POINT, SAME3};
use crate::autodiff::Var;
use crate::tensor::Scalar;

pub fn forward_segunet<T: Scalar>(sess: &mut Session<T>, config: &ModelConfig, x: Var) -> Result<Var> {
    let mut stages = Vec::with_capacity(config.levels);
    let mut h = x;
    for lvl in 0..config.levels {
        let a = sess.conv_bn_relu(&format!("enc{lvl}.conv1"), &format!("enc{lvl}.bn1"), h, SAME3)?;
        let s = sess.conv_bn_relu(&format!("enc{lvl}.conv2"), &format!("enc{lvl}.bn2"), a, SAME3)?;
        let (pooled, idx) = sess.tape.maxpool2d(s)?;
        stages.push((s, idx));
        h = pooled;
    }
    for lvl in (0..config.levels).rev() {
        let (skip, ref idx) = stages[lvl];
        let up = sess.tape.maxunpool2d(h, idx, idx.input_shape())?;
        sess.record(format!("unpool{lvl}"), up);
        let cat = sess.tape.concat_channels(up, skip)?;
        let a = sess.conv_bn_relu(&format!("dec{lvl}.conv1"), &format!("dec{lvl}.bn1"), cat, SAME3)?;
        h = sess.conv_bn_relu(&format!("dec{lvl}.conv2"), &format!("dec{lvl}.bn2"), a, SAME3)?;
    }
    sess.conv("head", h, POINT)
}
