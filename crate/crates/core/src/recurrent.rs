//! Unrolling a backbone over slice sequences.
//!
//! Step `t` sees slice `x^t` and, for recurrent models, the previous step's
//! probability map `y^(t-1)` as a second input channel; `y^0` is all zeros.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::autodiff::Var;
use crate::data::{normalize_intensity, to_sequence, DataError, Direction, Volume, VolumeMask};
use crate::model::{forward_backbone, ModelConfig, ModelError, ParamStore, Session};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum RecurrentError {
    #[error("empty slice sequence")]
    EmptySequence,
    #[error("sequence has no labels")]
    Unlabeled,
    #[error("threshold must lie in (0, 1), got {0}")]
    Threshold(f64),
    #[error("previous prediction {prev:?} does not match slice {slice:?}")]
    ExtentMismatch { slice: Vec<usize>, prev: Vec<usize> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = RecurrentError> = std::result::Result<T, E>;

/// Where the unpadded `height x width` region sits inside each padded slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Ordered `(1, 1, H, W)` slices with optional binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSequence<T> {
    slices: Vec<Tensor<T>>,
    labels: Option<Vec<Tensor<T>>>,
    spacing_mm: [f32; 3],
    direction: Direction,
    crop: Crop,
    prior: Option<Tensor<T>>,
}

impl<T: Scalar> SliceSequence<T> {
    pub fn new(
        slices: Vec<Tensor<T>>,
        labels: Option<Vec<Tensor<T>>>,
        spacing_mm: [f32; 3],
        direction: Direction,
        crop: Crop,
    ) -> std::result::Result<Self, TensorError> {
        let first = slices
            .first()
            .ok_or_else(|| TensorError::Invalid("slice sequence must hold at least one slice".into()))?;
        let (n, c, h, w) = first.dims4("slice")?;
        if n != 1 || c != 1 {
            return Err(TensorError::Invalid(format!(
                "slices must be (1, 1, H, W), got {:?}",
                first.shape()
            )));
        }
        let same = |t: &Tensor<T>, op: &'static str| {
            if t.shape() == first.shape() {
                Ok(())
            } else {
                Err(TensorError::ShapeMismatch {
                    op,
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                })
            }
        };
        for s in &slices {
            same(s, "slice sequence")?;
        }
        if let Some(ls) = &labels {
            if ls.len() != slices.len() {
                return Err(TensorError::Invalid(format!(
                    "{} labels for {} slices",
                    ls.len(),
                    slices.len()
                )));
            }
            for l in ls {
                same(l, "slice labels")?;
                if !l.data().iter().all(|&v| v == T::zero() || v == T::one()) {
                    return Err(TensorError::Invalid("labels must be binary".into()));
                }
            }
        }
        if crop.top + crop.height > h || crop.left + crop.width > w || crop.height == 0 || crop.width == 0 {
            return Err(TensorError::Invalid(format!("crop {crop:?} outside {h}x{w} slices")));
        }
        Ok(Self {
            slices,
            labels,
            spacing_mm,
            direction,
            crop,
            prior: None,
        })
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn slices(&self) -> &[Tensor<T>] {
        &self.slices
    }

    pub fn labels(&self) -> Option<&[Tensor<T>]> {
        self.labels.as_deref()
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing_mm
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn crop(&self) -> Crop {
        self.crop
    }

    /// Padded `(H, W)` of every slice.
    pub fn extent(&self) -> (usize, usize) {
        let s = self.slices[0].shape();
        (s[2], s[3])
    }

    /// State entering the first step when no explicit `y0` is given; zeros
    /// when absent.
    pub fn prior(&self) -> Option<&Tensor<T>> {
        self.prior.as_ref()
    }

    /// Consecutive sub-sequences of at most `max_len` slices. Each chunk after
    /// the first starts from the label of the slice just before it, when
    /// labels are present, so that it sees the state it would see mid-volume.
    pub fn chunks(&self, max_len: usize) -> Vec<SliceSequence<T>> {
        let max_len = max_len.max(1);
        (0..self.len())
            .step_by(max_len)
            .map(|start| {
                let end = (start + max_len).min(self.len());
                SliceSequence {
                    slices: self.slices[start..end].to_vec(),
                    labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
                    spacing_mm: self.spacing_mm,
                    direction: self.direction,
                    crop: self.crop,
                    prior: if start == 0 {
                        self.prior.clone()
                    } else {
                        self.labels.as_ref().map(|l| l[start - 1].clone())
                    },
                }
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> SliceSequence<U> {
        SliceSequence {
            slices: self.slices.iter().map(Tensor::cast).collect(),
            labels: self.labels.as_ref().map(|l| l.iter().map(Tensor::cast).collect()),
            spacing_mm: self.spacing_mm,
            direction: self.direction,
            crop: self.crop,
            prior: self.prior.as_ref().map(Tensor::cast),
        }
    }

    /// The labels cropped and restacked in storage order, if present.
    pub fn crop_labels(&self) -> Option<VolumeMask> {
        let labels = self.labels.as_ref()?;
        let bits: Vec<Vec<bool>> = labels
            .iter()
            .map(|l| l.data().iter().map(|&v| v > T::zero()).collect())
            .collect();
        stack_mask(&bits, self.extent().1, self.crop, self.direction, self.spacing_mm).ok()
    }
}

/// Crops per-step binary planes and stacks them in storage order.
fn stack_mask(
    planes: &[Vec<bool>],
    padded_w: usize,
    crop: Crop,
    direction: Direction,
    spacing: [f32; 3],
) -> std::result::Result<VolumeMask, DataError> {
    let d = planes.len();
    let mut voxels = Vec::with_capacity(d * crop.height * crop.width);
    for z in 0..d {
        let t = match direction {
            Direction::Ascending => z,
            Direction::Descending => d - 1 - z,
        };
        for y in 0..crop.height {
            let row = (y + crop.top) * padded_w + crop.left;
            voxels.extend(planes[t][row..row + crop.width].iter().map(|&b| u8::from(b)));
        }
    }
    VolumeMask::new([d, crop.height, crop.width], voxels, spacing)
}

/// How gradients treat the recurrent edge during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BpttMode {
    /// The previous prediction enters each step as a constant.
    #[default]
    Detach,
    /// Gradients flow back through every previous step.
    Full,
}

impl fmt::Display for BpttMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            BpttMode::Detach => "detach",
            BpttMode::Full => "full",
        })
    }
}

impl FromStr for BpttMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "detach" => Ok(BpttMode::Detach),
            "full" => Ok(BpttMode::Full),
            _ => Err(format!("unknown bptt mode {s:?} (expected detach or full)")),
        }
    }
}

/// Options for [`unroll_on_tape`].
#[derive(Debug, Clone, Copy, Default)]
pub struct Unroll {
    pub bptt: BpttMode,
    /// Feed the ground-truth previous label instead of the prediction.
    pub teacher_forcing: bool,
}

/// One step on the session's tape: probabilities for `x_t`.
pub fn step_on_tape<T: Scalar>(sess: &mut Session<T>, config: &ModelConfig, x_t: Var, y_prev: Var) -> Result<Var> {
    let input = if config.recurrent {
        let (xs, ps) = (sess.tape.value(x_t).shape(), sess.tape.value(y_prev).shape());
        if xs.len() != 4 || ps.len() != 4 || ps[1] != 1 || xs[0] != ps[0] || xs[2..] != ps[2..] {
            return Err(RecurrentError::ExtentMismatch {
                slice: xs.to_vec(),
                prev: ps.to_vec(),
            });
        }
        sess.tape.concat_channels(x_t, y_prev)?
    } else {
        x_t
    };
    let logits = forward_backbone(sess, config, input)?;
    Ok(sess.tape.sigmoid(logits)?)
}

/// Probabilities for one slice with frozen parameters, normalized per
/// `config.eval_norm`.
/// `y_prev` is ignored unless the model is recurrent.
pub fn step<T: Scalar>(
    store: &ParamStore<T>,
    config: &ModelConfig,
    x_t: &Tensor<T>,
    y_prev: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut sess = Session::new(store, config, config.eval_norm.mode(), false);
    let x = sess.tape.constant(x_t.clone());
    let p = sess.tape.constant(y_prev.clone());
    let out = step_on_tape(&mut sess, config, x, p)?;
    Ok(sess.tape.value(out).clone())
}

fn initial_state<T: Scalar>(seq: &SliceSequence<T>, y0: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let shape = seq.slices()[0].shape();
    match y0 {
        Some(y) if y.shape() != shape => Err(RecurrentError::ExtentMismatch {
            slice: shape.to_vec(),
            prev: y.shape().to_vec(),
        }),
        Some(y) => Ok(y.clone()),
        None => match seq.prior() {
            Some(p) => Ok(p.clone()),
            None => Ok(Tensor::zeros(shape.to_vec())),
        },
    }
}

/// Unrolls over `seq` on the session's tape and returns one probability var
/// per slice. `y0` defaults to the sequence's prior, else zeros.
pub fn unroll_on_tape<T: Scalar>(
    sess: &mut Session<T>,
    config: &ModelConfig,
    seq: &SliceSequence<T>,
    y0: Option<&Tensor<T>>,
    opts: Unroll,
) -> Result<Vec<Var>> {
    if seq.is_empty() {
        return Err(RecurrentError::EmptySequence);
    }
    if opts.teacher_forcing && seq.labels().is_none() {
        return Err(RecurrentError::Unlabeled);
    }
    let mut prev = sess.tape.constant(initial_state(seq, y0)?);
    let mut out = Vec::with_capacity(seq.len());
    for (t, x) in seq.slices().iter().enumerate() {
        let xv = sess.tape.constant(x.clone());
        let y = step_on_tape(sess, config, xv, prev)?;
        out.push(y);
        prev = if opts.teacher_forcing {
            sess.tape.constant(seq.labels().expect("checked above")[t].clone())
        } else {
            match opts.bptt {
                BpttMode::Detach => sess.tape.detach(y),
                BpttMode::Full => y,
            }
        };
    }
    Ok(out)
}

/// Inference probabilities for every slice of `seq` with frozen parameters,
/// feeding predictions forward. Normalization follows `config.eval_norm`.
/// The tape is rewound after each step so memory stays flat.
pub fn unroll_forward<T: Scalar>(
    store: &ParamStore<T>,
    config: &ModelConfig,
    seq: &SliceSequence<T>,
    y0: Option<&Tensor<T>>,
) -> Result<Vec<Tensor<T>>> {
    if seq.is_empty() {
        return Err(RecurrentError::EmptySequence);
    }
    let mut sess = Session::new(store, config, config.eval_norm.mode(), false);
    let mut prev = initial_state(seq, y0)?;
    let mut out = Vec::with_capacity(seq.len());
    for x in seq.slices() {
        sess.rewind();
        let xv = sess.tape.constant(x.clone());
        let pv = sess.tape.constant(prev);
        let y = step_on_tape(&mut sess, config, xv, pv)?;
        prev = sess.tape.value(y).clone();
        out.push(prev.clone());
    }
    Ok(out)
}

/// Windows `volume` with the model's intensity window and slices it (with
/// optional labels) into a padded sequence the model accepts.
pub fn prepare_sequence(
    config: &ModelConfig,
    volume: &Volume,
    labels: Option<&VolumeMask>,
) -> Result<SliceSequence<f32>> {
    let normalized = normalize_intensity(volume, config.window)?;
    Ok(to_sequence(
        &normalized,
        labels,
        config.direction,
        config.size_multiple(),
    )?)
}

/// Binarizes per-step probabilities (`p > threshold`) and restores the
/// sequence's original extents and storage order.
pub fn probabilities_to_mask<T: Scalar>(
    seq: &SliceSequence<T>,
    probs: &[Tensor<T>],
    threshold: f64,
) -> Result<VolumeMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(RecurrentError::Threshold(threshold));
    }
    let thr = T::from_f64_lossy(threshold);
    let planes: Vec<Vec<bool>> = probs
        .iter()
        .map(|p| p.data().iter().map(|&v| v > thr).collect())
        .collect();
    Ok(stack_mask(
        &planes,
        seq.extent().1,
        seq.crop(),
        seq.direction(),
        seq.spacing(),
    )?)
}

/// Segments a raw intensity volume: window, slice, unroll from zeros,
/// threshold strictly, and stack back into a mask with the volume's spacing.
pub fn segment_volume(
    store: &ParamStore<f32>,
    config: &ModelConfig,
    volume: &Volume,
    threshold: f64,
) -> Result<VolumeMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(RecurrentError::Threshold(threshold));
    }
    let seq = prepare_sequence(config, volume, None)?;
    let probs = unroll_forward(store, config, &seq, None)?;
    probabilities_to_mask(&seq, &probs, threshold)
}
