//! Single-task experts: an attention policy network and a value network
//! trained with clipped PPO against the intersection environment.

mod net;
mod ppo;
mod train;

pub use net::{ExpertNets, NetError, ATTENTION_FEATURES, ATTENTION_HEADS, ENCODER_WIDTH};
pub use ppo::{gae_advantages, normalize_advantages, ppo_loss, PpoBatch, PpoError, PpoLossParts};
pub use train::{
    load_expert, save_expert, train_expert, ExpertStats, IterationLog, TrainedExpert, TrainerError,
};

use serde::{Deserialize, Serialize};

/// PPO hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    /// Environment steps to train for.
    pub total_steps: usize,
    /// Steps collected per iteration.
    pub rollout_len: usize,
    /// Minibatch size for updates.
    pub minibatch: usize,
    /// Update epochs per rollout.
    pub epochs: usize,
    /// Discount factor.
    pub gamma: f64,
    /// Advantage estimation decay.
    pub gae_lambda: f64,
    /// Clipping range epsilon.
    pub clip_eps: f64,
    /// Adam learning rate.
    pub lr: f64,
    /// Value loss coefficient.
    pub vf_coef: f64,
    /// Entropy bonus coefficient.
    pub ent_coef: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Sample actions during rollouts (greedy when false).
    pub sample_actions: bool,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            total_steps: 20_000,
            rollout_len: 512,
            minibatch: 64,
            epochs: 4,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            lr: 3e-4,
            vf_coef: 0.5,
            ent_coef: 0.01,
            grad_clip: 0.5,
            sample_actions: true,
        }
    }
}
