//! Training by backpropagation through unrolled sequences.
//!
//! One optimizer step per sequence chunk: the chunk is unrolled on a fresh
//! train-mode tape, the per-step combined losses are summed, and a single
//! backward pass accumulates gradients from every step into the shared
//! parameters before one Adam update.

mod adam;
mod checkpoint;

use std::fmt;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, CheckpointError, RSCK_MAGIC,
    RSCK_VERSION,
};

use crate::autodiff::BatchNormMode;
use crate::loss::{loss_value, sequence_loss, LossWeights, DICE_SMOOTH};
use crate::metrics::dice_coefficient;
use crate::model::{ModelConfig, ModelError, ParamStore, Session};
use crate::recurrent::{
    probabilities_to_mask, unroll_forward, unroll_on_tape, BpttMode, RecurrentError, SliceSequence, Unroll,
};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("validation set is empty")]
    EmptyValSet,
    #[error("sequence has no labels")]
    Unlabeled,
    #[error("non-finite loss {loss} in epoch {epoch}; lower the learning rate or check the inputs")]
    Diverged { epoch: usize, loss: f64 },
    #[error(transparent)]
    Recurrent(#[from] RecurrentError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

impl TrainError {
    /// True when the root cause is a NaN or infinity produced by an op.
    fn is_non_finite(&self) -> bool {
        let tensor = match self {
            TrainError::Tensor(t)
            | TrainError::Model(ModelError::Tensor(t))
            | TrainError::Recurrent(RecurrentError::Tensor(t))
            | TrainError::Recurrent(RecurrentError::Model(ModelError::Tensor(t))) => t,
            _ => return false,
        };
        matches!(tensor, TensorError::NonFinite { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub weights: LossWeights,
    pub dice_smooth: f64,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    pub bptt: BpttMode,
    pub teacher_forcing: bool,
    /// Probability threshold for validation Dice.
    pub threshold: f64,
    /// Sequences are cut into chunks of at most this many slices.
    pub max_seq_len: usize,
    /// Stop as soon as validation Dice reaches this value.
    pub target_dice: Option<f64>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 40,
            patience: 10,
            weights: LossWeights::default(),
            dice_smooth: DICE_SMOOTH,
            seed: 0,
            bptt: BpttMode::Detach,
            teacher_forcing: false,
            threshold: 0.5,
            max_seq_len: 8,
            target_dice: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be >= 0, got {}", self.lr));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be >= 1".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        if !(self.dice_smooth >= 0.0 && self.dice_smooth.is_finite()) {
            return bad(format!("dice_smooth must be >= 0, got {}", self.dice_smooth));
        }
        self.weights.validate()?;
        self.adam.validate().map_err(TrainError::Config)?;
        Ok(())
    }

    /// Ordered `key = value` pairs for banners and logs.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("omega1", self.weights.omega1.to_string()),
            ("omega2", self.weights.omega2.to_string()),
            ("dice_smooth", self.dice_smooth.to_string()),
            ("seed", self.seed.to_string()),
            ("bptt", self.bptt.to_string()),
            ("teacher_forcing", self.teacher_forcing.to_string()),
            ("threshold", self.threshold.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            (
                "target_dice",
                self.target_dice.map_or_else(|| "none".to_string(), |d| d.to_string()),
            ),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
        ]
    }
}

/// Loss and per-parameter gradients of one labeled sequence, from a
/// train-mode unroll. Batch-norm running statistics in `store` are updated.
pub fn sequence_gradients<T: Scalar>(
    store: &mut ParamStore<T>,
    config: &ModelConfig,
    tc: &TrainConfig,
    seq: &SliceSequence<T>,
) -> Result<(f64, IndexMap<String, Tensor<T>>)> {
    let labels = seq.labels().ok_or(TrainError::Unlabeled)?;
    let mut sess = Session::new(store, config, BatchNormMode::Train, true);
    let opts = Unroll {
        bptt: tc.bptt,
        teacher_forcing: tc.teacher_forcing,
    };
    let preds = unroll_on_tape(&mut sess, config, seq, None, opts)?;
    let targets: Vec<_> = labels.iter().map(|y| sess.tape.constant(y.clone())).collect();
    let loss = sequence_loss(&mut sess.tape, &preds, &targets, tc.weights, tc.dice_smooth)?;
    let value = sess.tape.value(loss).item().to_f64_lossy();
    let grads = sess.tape.backward(loss)?;
    sess.commit_running(store);
    Ok((value, sess.param_grads(&grads)))
}

/// Unroll, summed loss, backward, one Adam update. Returns the loss before
/// the update.
pub fn train_step<T: Scalar>(
    store: &mut ParamStore<T>,
    config: &ModelConfig,
    tc: &TrainConfig,
    adam: &mut AdamState<T>,
    seq: &SliceSequence<T>,
) -> Result<f64> {
    let (loss, grads) = sequence_gradients(store, config, tc, seq)?;
    if !loss.is_finite() {
        return Err(TrainError::Diverged { epoch: 0, loss });
    }
    adam_step(store, &grads, adam, tc.lr)?;
    Ok(loss)
}

/// Eval-mode score of a set of labeled sequences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Mean per-slice combined loss over all slices.
    pub loss: f64,
    /// Mean over sequences of the volume Dice at the threshold.
    pub dice: f64,
}

/// Scores each sequence independently (in parallel) by unrolling it whole
/// with frozen parameters, then reduces in input order.
pub fn evaluate_sequences<T: Scalar + Send + Sync>(
    store: &ParamStore<T>,
    config: &ModelConfig,
    tc: &TrainConfig,
    seqs: &[SliceSequence<T>],
) -> Result<Evaluation> {
    if seqs.is_empty() {
        return Err(TrainError::EmptyValSet);
    }
    let per_seq: Vec<Result<(f64, usize, f64)>> = seqs
        .par_iter()
        .map(|seq| {
            let labels = seq.labels().ok_or(TrainError::Unlabeled)?;
            let probs = unroll_forward(store, config, seq, None)?;
            let mut loss = 0.0;
            for (p, y) in probs.iter().zip(labels) {
                loss += loss_value(p, y, tc.weights, tc.dice_smooth)?;
            }
            let pred = probabilities_to_mask(seq, &probs, tc.threshold)?;
            let gt = seq.crop_labels().ok_or(TrainError::Unlabeled)?;
            let dice = dice_coefficient(&pred, &gt).map_err(|e| TrainError::Config(e.to_string()))?;
            Ok((loss, probs.len(), dice))
        })
        .collect();
    let (mut loss, mut slices, mut dice) = (0.0, 0usize, 0.0);
    for r in per_seq {
        let (l, n, d) = r?;
        loss += l;
        slices += n;
        dice += d;
    }
    Ok(Evaluation {
        loss: loss / slices as f64,
        dice: dice / seqs.len() as f64,
    })
}

/// Patience counter over a monitored loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    /// Records `loss` for `epoch`; returns true when it is a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-slice training loss over the epoch's steps.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    EpochsExhausted,
    Patience,
    TargetDice,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            StopReason::EpochsExhausted => "epochs exhausted",
            StopReason::Patience => "no validation improvement within patience",
            StopReason::TargetDice => "target dice reached",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stop: StopReason,
}

impl History {
    /// `epoch,train_loss,val_loss,val_dice` with six decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_dice\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                r.epoch, r.train_loss, r.val_loss, r.val_dice
            ));
        }
        out
    }
}

/// Full training loop with seeded shuffling, validation after every epoch,
/// early stopping on validation loss and best-snapshot restore. `on_epoch`
/// sees each record as it is produced.
pub fn train<T: Scalar + Send + Sync>(
    store: &mut ParamStore<T>,
    config: &ModelConfig,
    tc: &TrainConfig,
    train_set: &[SliceSequence<T>],
    val_set: &[SliceSequence<T>],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    tc.validate()?;
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptyValSet);
    }
    if train_set.iter().chain(val_set).any(|s| s.labels().is_none()) {
        return Err(TrainError::Unlabeled);
    }
    let chunks: Vec<SliceSequence<T>> = train_set.iter().flat_map(|s| s.chunks(tc.max_seq_len)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    let mut adam = AdamState::new(store, tc.adam);
    let mut stopper = EarlyStopping::new(tc.patience);
    let mut best = store.clone();
    let mut history = Vec::new();
    let mut stop = StopReason::EpochsExhausted;

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut slices) = (0.0, 0usize);
        for &i in &order {
            let loss = train_step(store, config, tc, &mut adam, &chunks[i]).map_err(|e| match e {
                TrainError::Diverged { loss, .. } => TrainError::Diverged { epoch, loss },
                e if e.is_non_finite() => TrainError::Diverged { epoch, loss: f64::NAN },
                other => other,
            })?;
            loss_sum += loss;
            slices += chunks[i].len();
        }
        let val = evaluate_sequences(store, config, tc, val_set)?;
        if !val.loss.is_finite() {
            return Err(TrainError::Diverged { epoch, loss: val.loss });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / slices as f64,
            val_loss: val.loss,
            val_dice: val.dice,
        };
        on_epoch(&record);
        history.push(record);
        if stopper.observe(epoch, val.loss) {
            best.clone_from(store);
        }
        if tc.target_dice.is_some_and(|t| val.dice >= t) {
            // Keep the parameters that hit the target.
            best.clone_from(store);
            stop = StopReason::TargetDice;
            break;
        }
        if stopper.should_stop() {
            stop = StopReason::Patience;
            break;
        }
    }
    let best_epoch = if stop == StopReason::TargetDice {
        history.len()
    } else {
        stopper.best().map_or(history.len(), |(e, _)| e)
    };
    *store = best;
    Ok(History {
        epochs: history,
        best_epoch,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_patience() {
        let mut s = EarlyStopping::new(1);
        assert!(s.observe(1, 1.0));
        assert!(!s.should_stop());
        assert!(!s.observe(2, 1.5));
        assert!(s.should_stop());
        assert_eq!(s.best(), Some((1, 1.0)));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
            TrainConfig {
                patience: 0,
                ..Default::default()
            },
            TrainConfig {
                lr: f64::NAN,
                ..Default::default()
            },
            TrainConfig {
                threshold: 1.0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
