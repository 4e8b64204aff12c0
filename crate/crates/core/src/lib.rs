//! Recurrent encoder-decoder segmentation of slice sequences.
//!
//! A segmentation backbone (Unet, SegUnet or AttUnet) is unrolled over the
//! slices of a volume, each step receiving the previous step's probability
//! map as an extra input channel. Training minimizes a weighted sum of
//! binary cross-entropy and soft Dice over the whole sequence with Adam.
//! Everything runs on the small reverse-mode autodiff engine in
//! [`autodiff`].

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod data;
pub mod gradcheck;
pub(crate) mod kv;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod recurrent;
pub mod tensor;
pub mod train;
