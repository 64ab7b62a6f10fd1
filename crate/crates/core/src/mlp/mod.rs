//! Feed-forward regressor with three ReLU hidden layers (60, 20, 10 units)
//! and a linear scalar output, trained by mini-batch SGD with Nesterov
//! momentum, inverted dropout and step-decay learning rates.

mod network;
mod optim;
mod params;
mod schedule;
mod train;

use thiserror::Error;

pub use network::{backward, batch_loss, first_hidden, forward, forward_masked, predict, DropoutMasks, ForwardMode};
pub use optim::{lookahead, nesterov_update, sgd_nesterov_step};
pub use params::{init_bound, init_params, Gradients, Layer, LayerStack, NetworkParams, Velocity, HIDDEN_LAYERS};
pub use schedule::{lr_at, StepDecaySchedule, DEFAULT_DECAY};
pub use train::{train_single, StopReason, TrainConfig, TrainHistory, Trainer};

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite {0} values")]
    NonFinite(String),
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("malformed parameter document: {0}")]
    Format(String),
    #[error("rmse needs equal, non-zero lengths (got {0} and {1})")]
    Length(usize, usize),
}

/// Root mean squared error.
pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64, MlpError> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(MlpError::Length(preds.len(), targets.len()));
    }
    let ss: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((ss / preds.len() as f64).sqrt())
}
