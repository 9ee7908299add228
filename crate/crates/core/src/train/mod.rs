//! Optimizers, freezing policies, run reports and the pretrain/finetune
//! protocols for both toy tasks.

mod optim;
mod policy;
mod report;
mod signal;
mod vae;

pub use optim::{adam_step, clip_grad_norm, grad_norm, Adam, AdamConfig, Moments, OptimizerKind};
pub use policy::FreezePolicy;
pub use report::{EpochRecord, RunReport, HISTORY_HEADER};
pub use signal::{evaluate_signal, finetune_signal, pretrain_signal, SignalEval};
pub use vae::{evaluate_vae, finetune_vae_dictionary, pretrain_vae, VaeEval, FINETUNE_CLASSES, NOISE_STD, PRETRAIN_CLASSES};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::ActivationPolicy;

/// Hyperparameters shared by every protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Batches per epoch for streamed tasks; dataset tasks use full passes.
    pub batches_per_epoch: usize,
    pub eval_size: usize,
    pub seed: u64,
    pub activation: ActivationPolicy,
    /// When set, overrides `activation` with top-k at `k = round(ρ·M)`.
    pub density_target: Option<f64>,
    pub ortho_weight: f32,
    pub atoms: usize,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamConfig::default(),
            epochs: 20,
            batch_size: 64,
            batches_per_epoch: 16,
            eval_size: 256,
            seed: 0,
            activation: ActivationPolicy::default(),
            density_target: None,
            ortho_weight: 1e-3,
            atoms: 100,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.batches_per_epoch == 0 || self.eval_size == 0 {
            return Err(Error::Config("batch sizes and eval size must be positive".into()));
        }
        if self.atoms == 0 {
            return Err(Error::Config("dictionary size must be positive".into()));
        }
        if let Some(rho) = self.density_target {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::Config(format!("density target must lie in (0, 1], got {rho}")));
            }
        }
        self.effective_activation().validate(self.atoms).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn effective_activation(&self) -> ActivationPolicy {
        match self.density_target {
            Some(rho) => ActivationPolicy::TopK { k: ((rho * self.atoms as f64).round() as usize).max(1) },
            None => self.activation,
        }
    }
}

/// Counts nonzero entries per atom column of `[.., M]` coefficients.
pub(crate) fn atom_usage(coeffs: &[f32], atoms: usize) -> Vec<u64> {
    let mut usage = vec![0u64; atoms];
    for row in coeffs.chunks_exact(atoms) {
        for (u, &c) in usage.iter_mut().zip(row) {
            if c.abs() > crate::sparse::NONZERO_EPS {
                *u += 1;
            }
        }
    }
    usage
}
