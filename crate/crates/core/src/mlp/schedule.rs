use serde::{Deserialize, Serialize};

use super::MlpError;

/// Step-decay learning rate, optionally restarted every `cycle_epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecaySchedule {
    /// Multiplier applied at each step (0.6 removes 40% of the rate).
    pub decay_factor: f64,
    pub step_epochs: usize,
    pub cycle_epochs: Option<usize>,
}

pub const DEFAULT_DECAY: f64 = 0.6;

impl StepDecaySchedule {
    pub fn non_cyclic(step_epochs: usize) -> Self {
        Self { decay_factor: DEFAULT_DECAY, step_epochs, cycle_epochs: None }
    }

    pub fn cyclic(cycle_epochs: usize, step_epochs: usize) -> Self {
        Self { decay_factor: DEFAULT_DECAY, step_epochs, cycle_epochs: Some(cycle_epochs) }
    }

    pub fn validate(&self) -> Result<(), MlpError> {
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(MlpError::Config(format!("decay factor {}", self.decay_factor)));
        }
        if self.step_epochs == 0 {
            return Err(MlpError::Config("step_epochs must be at least 1".into()));
        }
        if let Some(c) = self.cycle_epochs {
            if c < self.step_epochs {
                return Err(MlpError::Config(format!(
                    "cycle of {c} epochs is shorter than the {}-epoch decay step",
                    self.step_epochs
                )));
            }
        }
        Ok(())
    }

    /// Number of decays applied by `epoch` (0-based).
    pub fn decays_at(&self, epoch: usize) -> usize {
        let e = match self.cycle_epochs {
            Some(c) => epoch % c,
            None => epoch,
        };
        e / self.step_epochs
    }
}

/// Learning rate in effect during `epoch` (0-based).
pub fn lr_at(schedule: &StepDecaySchedule, epoch: usize, lr0: f64) -> f64 {
    // Repeated multiplication, so rates match a step-by-step decay exactly.
    (0..schedule.decays_at(epoch)).fold(lr0, |lr, _| lr * schedule.decay_factor)
}
