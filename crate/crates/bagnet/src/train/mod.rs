//! Training harness: loss, optimizer, fold splitting and the run loop.

mod adam;
mod harness;
mod kfold;
mod loss;

pub use adam::{adam_step, AdamState};
pub use harness::{evaluate, evaluate_params, train, EvalOptions, FoldRecord, RunRecord, TrainOutput};
pub use kfold::kfold_split;
pub use loss::bce_loss;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of a training run. The defaults are the published recipe:
/// learning rate 0.001, 50 epochs, batches of 12, three folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Number of cross-validation folds; 1 disables cross-validation and
    /// trains on the full manifest.
    pub folds: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub bce_clamp_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            epochs: 50,
            batch_size: 12,
            folds: 3,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            bce_clamp_eps: 1e-7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config(format!(
                "epochs and batch_size must be >= 1, got {}/{}",
                self.epochs, self.batch_size
            )));
        }
        if self.folds < 1 {
            return Err(Error::Config("folds must be >= 1".into()));
        }
        if !(self.bce_clamp_eps > 0.0 && self.bce_clamp_eps < 0.5) {
            return Err(Error::Config(format!(
                "bce_clamp_eps must be in (0, 0.5), got {}",
                self.bce_clamp_eps
            )));
        }
        Ok(())
    }

    /// Learning rate for an epoch. Constant for now; a decay schedule would
    /// slot in here.
    pub fn learning_rate_at(&self, _epoch: usize) -> f64 {
        self.learning_rate
    }
}
