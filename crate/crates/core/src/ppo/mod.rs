//! PPO fine-tuning against a scalar reward with a KL penalty to a frozen
//! reference policy.
//!
//! Each episode samples responses from the policy, shapes per-token rewards
//! as `-beta * (log pi - log p)` plus the terminal reward on the last token,
//! estimates advantages with GAE against a linear value head, and takes
//! clipped-surrogate steps. `beta` is either fixed or adapted to keep the
//! measured KL near a target.

mod estimate;
mod rollout;
mod train;
mod update;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use estimate::{expected_reward, measure_kl, policy_expected_reward, Estimate};
pub use rollout::{
    adapt_beta, collect_rollouts, estimate_kl, gae, shaped_reward, token_rewards, ModelReward,
    OracleReward, RewardFn, Rollout, RolloutBatch, BETA_MAX, BETA_MIN,
};
pub use train::{train, EpisodeRecord, PpoEnv, PpoHistory, Transcript};
pub use update::{
    ppo_update, surrogate_loss_on, whiten, PpoOptState, UpdateStats, ValueHead, VALUE_BIAS_BLOCK,
    VALUE_WEIGHT_BLOCK,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaMode {
    Fixed,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub beta0: f64,
    pub beta_mode: BetaMode,
    /// Target KL per sequence, in nats.
    pub kl_target: f64,
    pub clip_eps: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub episodes: usize,
    pub rollouts: usize,
    pub ppo_epochs: usize,
    pub minibatch: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub max_response_len: usize,
    pub temperature: f64,
    pub max_grad_norm: f64,
    /// Re-fit the reward model on the current policy's features each episode.
    pub refresh_reward_model: bool,
    /// Decoded samples kept per episode record.
    pub transcripts: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            beta0: 0.05,
            beta_mode: BetaMode::Fixed,
            kl_target: 6.0,
            clip_eps: 0.2,
            policy_lr: 2e-4,
            value_lr: 1e-2,
            episodes: 50,
            rollouts: 64,
            ppo_epochs: 4,
            minibatch: 16,
            gamma: 1.0,
            gae_lambda: 0.95,
            max_response_len: 16,
            temperature: 1.0,
            max_grad_norm: 1.0,
            refresh_reward_model: false,
            transcripts: 3,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip_eps must be in (0, 1), got {}", self.clip_eps));
        }
        if !(self.beta0 >= 0.0) || !self.beta0.is_finite() {
            return bad(format!("beta0 must be >= 0, got {}", self.beta0));
        }
        if !(self.kl_target > 0.0) || !self.kl_target.is_finite() {
            return bad(format!("kl_target must be > 0, got {}", self.kl_target));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must be in [0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!(
                "gae_lambda must be in [0, 1], got {}",
                self.gae_lambda
            ));
        }
        for (name, v) in [
            ("policy_lr", self.policy_lr),
            ("value_lr", self.value_lr),
            ("max_grad_norm", self.max_grad_norm),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        for (name, v) in [
            ("rollouts", self.rollouts),
            ("ppo_epochs", self.ppo_epochs),
            ("minibatch", self.minibatch),
            ("max_response_len", self.max_response_len),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        Ok(())
    }
}
