//! Optimizers, gradient clipping, initialization, normalization and
//! regularization used when training the recurrent networks.

pub mod clip;
pub mod dropout;
pub mod init;
pub mod norm;
pub mod optim;
pub mod projection;
mod trainer;

use serde::{Deserialize, Serialize};

pub use clip::{clip_gradients, clip_gradients_per_tensor, ClipMode, ClipOutcome};
pub use dropout::dropout_mask;
pub use init::{init_params, InitScheme};
pub use norm::{layer_norm, LayerNorm};
pub use optim::{adam_step, rmsprop_step, sgd_step, Hyper, OptimizerKind, OptimizerState};
pub use projection::{input_projection, Projection};
pub use trainer::{evaluate, BatchGradient, EvalReport, StepMetrics, Trainer};

use crate::cells::Arch;
use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::sequence::ModelLayout;

/// Hyperparameters of a training run. Every field has a default so a config
/// file only needs the values it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: Real,
    pub optimizer: OptimizerKind,
    pub rmsprop_decay: Real,
    pub adam_beta1: Real,
    pub adam_beta2: Real,
    pub epsilon: Real,
    pub clip_threshold: Option<Real>,
    pub clip_mode: ClipMode,
    pub truncation: Option<usize>,
    pub keep_prob: Real,
    /// Divide the loss (and its gradient) by the longest sequence in the batch.
    pub normalize_loss: bool,
    pub forget_bias: Real,
    pub init: InitScheme,
    /// Overrides the scheme for recurrent (state-to-state) matrices.
    pub recurrent_init_scale: Option<Real>,
    pub seed: u64,
    /// Optimizer steps to run.
    pub steps: usize,
    pub batch_size: usize,
    pub layer_norm: bool,
    pub projection_dim: Option<usize>,
    pub trainable_initial_state: bool,
    /// Compute per-sample gradients in parallel; reduction order is fixed.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            rmsprop_decay: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            epsilon: 1e-8,
            clip_threshold: Some(5.0),
            clip_mode: ClipMode::Global,
            truncation: None,
            keep_prob: 1.0,
            normalize_loss: false,
            forget_bias: 1.0,
            init: InitScheme::Glorot,
            recurrent_init_scale: None,
            seed: 0,
            steps: 1000,
            batch_size: 16,
            layer_norm: false,
            projection_dim: None,
            trainable_initial_state: false,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        dropout::check_keep_prob(self.keep_prob)?;
        if let Some(c) = self.clip_threshold {
            if !(c > 0.0) {
                return bad(format!("clip threshold must be positive, got {c}"));
            }
        }
        if self.truncation == Some(0) {
            return bad("truncation length must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay)
            || !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
        {
            return bad("decay rates must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive".into());
        }
        if self.projection_dim == Some(0) {
            return bad("projection dim must be positive".into());
        }
        if let InitScheme::Uniform { scale } = self.init {
            if !(scale >= 0.0) {
                return bad("init scale must be non-negative".into());
            }
        }
        Ok(())
    }

    /// Network layout implied by this config for the given dimensions.
    pub fn layout(
        &self,
        arch: Arch,
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        layers: usize,
    ) -> ModelLayout {
        ModelLayout {
            layers,
            projection_dim: self.projection_dim,
            layer_norm: self.layer_norm,
            trainable_initial_state: self.trainable_initial_state,
            ..ModelLayout::new(arch, input_dim, hidden_dim, output_dim)
        }
    }

    pub fn hyper(&self) -> Hyper {
        Hyper {
            learning_rate: self.learning_rate,
            rmsprop_decay: self.rmsprop_decay,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Divides a summed loss by the longest sequence length in the batch.
pub fn normalize_loss(total: Real, max_seq_len: usize) -> Result<Real> {
    if max_seq_len == 0 {
        return Err(Error::InvalidArgument("max sequence length must be at least 1".into()));
    }
    Ok(total / max_seq_len as Real)
}
