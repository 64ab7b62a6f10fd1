//! Mini-batch training loop with validation monitoring and early stopping.

use serde::{Deserialize, Serialize};

use super::network::{backward, predict, DropoutMasks};
use super::optim::{lookahead, step_in_place};
use super::params::{init_params, NetworkParams, Velocity};
use super::schedule::{lr_at, StepDecaySchedule};
use super::{rmse, MlpError};
use crate::dataset::{make_batches, Dataset, SplitPlan};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub dropout_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_fraction: f64,
    pub schedule: StepDecaySchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.005,
            momentum: 0.9,
            dropout_rate: 0.10,
            max_epochs: 3000,
            patience: 200,
            batch_fraction: 0.15,
            schedule: StepDecaySchedule::non_cyclic(200),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), MlpError> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(MlpError::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(MlpError::Config(format!("dropout rate {}", self.dropout_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(MlpError::Config(format!("momentum {}", self.momentum)));
        }
        if self.patience > self.max_epochs || self.max_epochs == 0 {
            return Err(MlpError::Config(format!(
                "patience {} with max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.batch_fraction > 0.0 && self.batch_fraction <= 1.0) {
            return Err(MlpError::Config(format!("batch fraction {}", self.batch_fraction)));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub valid_rmse: Vec<f64>,
    pub lr: Vec<f64>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    pub fn best_rmse(&self) -> f64 {
        self.valid_rmse[self.best_epoch]
    }
}

/// One optimizer trajectory over a fixed split. Epochs are driven by the
/// caller so the same loop serves early-stopped and snapshot training.
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    split: &'a SplitPlan,
    config: TrainConfig,
    seed: u64,
    params: NetworkParams,
    velocity: Velocity,
    valid_x: Vec<&'a [f64]>,
    valid_y: Vec<f64>,
    epochs_done: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        dataset: &'a Dataset,
        split: &'a SplitPlan,
        config: TrainConfig,
        seed: u64,
    ) -> Result<Self, MlpError> {
        config.validate()?;
        if split.train.is_empty() || split.valid.is_empty() {
            return Err(MlpError::Config("split needs non-empty train and validation sets".into()));
        }
        if let Some(&i) = split.train.iter().chain(&split.valid).find(|&&i| i >= dataset.len()) {
            return Err(MlpError::Config(format!("split index {i} out of range")));
        }
        let params = init_params(dataset.n_features(), seed)?;
        let velocity = params.stack.zeros_like();
        Ok(Self {
            dataset,
            split,
            config,
            seed,
            params,
            velocity,
            valid_x: dataset.rows(&split.valid),
            valid_y: dataset.targets_at(&split.valid),
            epochs_done: 0,
        })
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Rate used by the next call to [`Trainer::run_epoch`].
    pub fn current_lr(&self) -> f64 {
        lr_at(&self.config.schedule, self.epochs_done, self.config.lr0)
    }

    /// Train one epoch; returns the learning rate that was used.
    pub fn run_epoch(&mut self) -> Result<f64, MlpError> {
        let epoch = self.epochs_done;
        let lr = self.current_lr();
        let cfg = self.config;
        let batch_seed = seed::derive_path(self.seed, &[seed::stream::BATCH, epoch as u64]);
        let batches = make_batches(&self.split.train, cfg.batch_fraction, batch_seed)
            .map_err(|e| MlpError::Config(e.to_string()))?;
        let mut mask_rng = seed::rng(seed::derive_path(self.seed, &[seed::stream::DROPOUT, epoch as u64]));

        for batch in &batches {
            let xs = self.dataset.rows(batch);
            let ys = self.dataset.targets_at(batch);
            let masks: Vec<DropoutMasks> = batch
                .iter()
                .map(|_| DropoutMasks::sample(&self.params, cfg.dropout_rate, &mut mask_rng))
                .collect();
            let ahead = lookahead(&self.params, &self.velocity, cfg.momentum);
            let (grads, loss) = backward(&ahead, &xs, &ys, &masks)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(MlpError::Diverged { epoch });
            }
            step_in_place(&mut self.params.stack, &mut self.velocity, &grads, lr, cfg.momentum)?;
        }
        if !self.params.stack.all_finite() {
            return Err(MlpError::Diverged { epoch });
        }
        self.epochs_done += 1;
        Ok(lr)
    }

    pub fn validation_predictions(&self) -> Vec<f64> {
        predict(&self.params, &self.valid_x).expect("widths checked at construction")
    }

    pub fn validation_rmse(&self) -> f64 {
        rmse(&self.validation_predictions(), &self.valid_y).expect("non-empty validation set")
    }
}

/// Train one network with early stopping; returns the parameters of the best
/// validation epoch.
pub fn train_single(
    dataset: &Dataset,
    split: &SplitPlan,
    config: &TrainConfig,
    seed: u64,
) -> Result<(NetworkParams, TrainHistory), MlpError> {
    let mut trainer = Trainer::new(dataset, split, *config, seed)?;
    let mut valid_rmse = Vec::new();
    let mut lrs = Vec::new();
    let mut best: Option<(usize, f64, NetworkParams)> = None;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 0..config.max_epochs {
        let lr = trainer.run_epoch()?;
        let v = trainer.validation_rmse();
        if !v.is_finite() {
            return Err(MlpError::Diverged { epoch });
        }
        valid_rmse.push(v);
        lrs.push(lr);
        match &best {
            Some((_, best_v, _)) if v >= *best_v => {}
            _ => best = Some((epoch, v, trainer.params().clone())),
        }
        let best_epoch = best.as_ref().map(|b| b.0).unwrap_or(0);
        if epoch - best_epoch >= config.patience {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    let (best_epoch, _, params) = best.expect("max_epochs >= 1");
    Ok((params, TrainHistory { valid_rmse, lr: lrs, best_epoch, stop_reason }))
}
