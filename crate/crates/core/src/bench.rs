//! Recurrent versus per-slice comparison on decoy phantoms.
//!
//! Both arms share architecture, data, seeds and training budget; only the
//! `recurrent` flag differs. Test volumes are segmented from raw intensities
//! and scored with volume Dice against their masks.

use crate::data::{generate_set, PhantomSpec};
use crate::metrics::dice_coefficient;
use crate::model::{build_model, ModelConfig};
use crate::recurrent::{prepare_sequence, segment_volume};
use crate::train::{train, TrainConfig, TrainError};

#[derive(Debug, Clone)]
pub struct BenchSettings {
    /// Architecture; `recurrent` is overridden per arm.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Phantom template; `decoys` should be on and `seed` is overridden.
    pub phantom: PhantomSpec,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// One full comparison per seed.
    pub seeds: Vec<u64>,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                levels: 2,
                base_channels: 8,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                lr: 3e-3,
                epochs: 12,
                patience: 4,
                max_seq_len: 16,
                ..TrainConfig::default()
            },
            phantom: PhantomSpec {
                dims: [16, 32, 32],
                decoys: true,
                ..PhantomSpec::default()
            },
            n_train: 40,
            n_val: 5,
            n_test: 10,
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub seed: u64,
    pub recurrent: bool,
    pub epochs_run: usize,
    /// Dice of each test volume.
    pub test_dice: Vec<f64>,
}

impl ArmResult {
    pub fn mean_dice(&self) -> f64 {
        self.test_dice.iter().sum::<f64>() / self.test_dice.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub arms: Vec<ArmResult>,
}

impl BenchReport {
    fn mean_over(&self, recurrent: bool) -> f64 {
        let arms: Vec<_> = self.arms.iter().filter(|a| a.recurrent == recurrent).collect();
        arms.iter().map(|a| a.mean_dice()).sum::<f64>() / arms.len() as f64
    }

    pub fn mean_recurrent(&self) -> f64 {
        self.mean_over(true)
    }

    pub fn mean_per_slice(&self) -> f64 {
        self.mean_over(false)
    }

    /// Recurrent minus per-slice mean test Dice.
    pub fn margin(&self) -> f64 {
        self.mean_recurrent() - self.mean_per_slice()
    }
}

/// Runs both arms for every seed. Train, validation and test volumes for
/// seed `s` come from disjoint seed streams derived from `s`.
pub fn compare_recurrence(settings: &BenchSettings, mut log: impl FnMut(&str)) -> Result<BenchReport, TrainError> {
    let mut arms = Vec::new();
    for &seed in &settings.seeds {
        let set = |offset: u64, n: usize| {
            let spec = PhantomSpec {
                seed: seed.wrapping_mul(3).wrapping_add(offset) ^ 0x5eed_0000,
                ..settings.phantom.clone()
            };
            generate_set(&spec, n).map_err(|e| TrainError::Config(e.to_string()))
        };
        let train_vols = set(0, settings.n_train)?;
        let val_vols = set(1, settings.n_val)?;
        let test_vols = set(2, settings.n_test)?;
        for recurrent in [false, true] {
            let model = ModelConfig {
                recurrent,
                ..settings.model.clone()
            };
            let seqs = |vols: &[(crate::data::Volume, crate::data::VolumeMask)]| {
                vols.iter()
                    .map(|(v, m)| prepare_sequence(&model, v, Some(m)))
                    .collect::<Result<Vec<_>, _>>()
            };
            let (train_set, val_set) = (seqs(&train_vols)?, seqs(&val_vols)?);
            let tc = TrainConfig {
                seed,
                ..settings.train.clone()
            };
            let mut store = build_model::<f32>(&model, seed)?;
            let history = train(&mut store, &model, &tc, &train_set, &val_set, |r| {
                log(&format!(
                    "seed {seed} recurrent={recurrent} epoch {} train {:.4} val {:.4} dice {:.4}",
                    r.epoch, r.train_loss, r.val_loss, r.val_dice
                ));
            })?;
            let mut test_dice = Vec::with_capacity(test_vols.len());
            for (v, m) in &test_vols {
                let pred = segment_volume(&store, &model, v, tc.threshold)?;
                test_dice.push(dice_coefficient(&pred, m).map_err(|e| TrainError::Config(e.to_string()))?);
            }
            let arm = ArmResult {
                seed,
                recurrent,
                epochs_run: history.epochs.len(),
                test_dice,
            };
            log(&format!(
                "seed {seed} recurrent={recurrent}: mean test dice {:.4}",
                arm.mean_dice()
            ));
            arms.push(arm);
        }
    }
    Ok(BenchReport { arms })
}
