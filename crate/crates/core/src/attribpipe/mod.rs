//! The learning stages: attribute selection (optimize `W` with the attribute
//! embeddings frozen), top-N̂ pruning, modality-gap adaptation and attribute
//! refinement (optimize the embeddings with `W` frozen).
//!
//! Stage order is select → adapt → refine. Every stage is plain full-batch
//! gradient descent and fully deterministic given its seed.

mod adaptation;
mod exemplars;
mod refinement;
mod selection;

pub use adaptation::{adapt_attributes, adapt_embeddings, AdaptConfig, Adaptation};
pub use exemplars::{build_exemplar_set, ExemplarMode, ExemplarSet, EXEMPLAR_IOU};
pub use refinement::{refine_attributes, refinement_grad, refinement_loss};
pub use selection::{
    class_logits, prune_top_n, select_attributes, select_from_batch, selection_bce, selection_grad,
    selection_loss, Batch, SelectionModel,
};

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters for the gradient-descent stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// L1 weight λ on `W` (selection only).
    pub l1_weight: f64,
    /// Per-class attribute budget N̂ (selection only).
    pub n_hat: usize,
    pub seed: u64,
    /// Stop once the loss changes by less than this between epochs.
    pub tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 500,
            l1_weight: 1e-3,
            n_hat: 25,
            seed: 0,
            tolerance: 1e-12,
        }
    }
}

impl TrainConfig {
    /// Defaults for attribute refinement. Refinement moves the embeddings
    /// themselves, so it runs shorter and slower than selection.
    pub fn refinement() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 100,
            l1_weight: 0.0,
            ..Self::default()
        }
    }

    /// Every violated constraint, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            v.push(alloc::format!(
                "learning_rate must be finite and >= 0 (got {})",
                self.learning_rate
            ));
        }
        if self.epochs == 0 {
            v.push("epochs must be >= 1".into());
        }
        if !(self.l1_weight.is_finite() && self.l1_weight >= 0.0) {
            v.push(alloc::format!(
                "l1_weight must be finite and >= 0 (got {})",
                self.l1_weight
            ));
        }
        if self.n_hat == 0 {
            v.push("n_hat must be >= 1".into());
        }
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            v.push(alloc::format!(
                "tolerance must be finite and >= 0 (got {})",
                self.tolerance
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v.join("; ")))
        }
    }
}

/// Loss trajectory of a training stage. `losses[0]` is the loss before the
/// first update.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    /// Loss of the returned parameters (the best iterate seen).
    pub final_loss: f64,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }
}
