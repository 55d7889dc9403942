//! Cross-entropy training with Adam, pretrain/fine-tune starts, the encoder
//! freeze policy, and finite-difference gradient checks.

mod adam;
mod gradcheck;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{gradient_check, GradCheckReport, Probe};
pub use train::{
    cross_entropy_loss, encode_targets, evaluate_char_accuracy, train_loop, train_loop_with,
    LogEntry, Start, TrainLog,
};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezePolicy {
    #[default]
    None,
    /// Convolutions, batch norm and the column projection stay fixed.
    EncoderFrozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub freeze_policy: FreezePolicy,
    pub adam: AdamConfig,
    /// Iterations between log entries with held-out evaluation.
    pub eval_every: usize,
    /// Cap on held-out samples scored per evaluation.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            iterations: 3000,
            seed: 0,
            freeze_policy: FreezePolicy::None,
            adam: AdamConfig::default(),
            eval_every: 250,
            eval_samples: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        Ok(())
    }
}
