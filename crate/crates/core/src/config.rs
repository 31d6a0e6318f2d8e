//! Run configuration: one flat TOML table, overridable key by key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{LmConfig, LmTrainConfig};
use crate::ppo::{BetaMode, PpoConfig};
use crate::reward_model::{Pooling, RewardTrainConfig};

/// Consulted for `out_dir` when no `--out` flag is given.
pub const OUT_ENV: &str = "CIRCUMPLEX_RL_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardSource {
    /// Learned reward head.
    Model,
    /// The simulated user's lexicon judgement.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,

    /// MELD-style CSV; unset means a synthetic corpus.
    pub meld: Option<PathBuf>,
    pub dialogues: usize,
    pub lexicon: Option<PathBuf>,
    pub circumplex: Option<PathBuf>,
    pub vocab_max: usize,

    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub lm_steps: usize,
    pub lm_batch: usize,
    pub lm_lr: f64,

    pub rm_steps: usize,
    pub rm_lr: f64,
    pub rm_mu: f64,
    pub rm_holdout: f64,
    pub pooling: Pooling,

    pub reward_source: RewardSource,
    pub episodes: usize,
    pub rollouts: usize,
    pub ppo_epochs: usize,
    pub minibatch: usize,
    pub beta0: f64,
    pub beta_mode: BetaMode,
    pub kl_target: f64,
    pub clip_eps: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub max_response_len: usize,
    pub temperature: f64,
    pub refresh_reward_model: bool,
    /// Save a policy checkpoint every this many episodes; 0 disables.
    pub checkpoint_every: usize,
    pub prompts: usize,

    /// Weight of the extrinsic reward against the simulated self-assessment.
    pub lambda: f64,
    pub noise: f64,
    pub eval_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ppo = PpoConfig::default();
        let lm = LmConfig::desk(0);
        let lmt = LmTrainConfig::default();
        let rm = RewardTrainConfig::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/desk"),
            meld: None,
            dialogues: 400,
            lexicon: None,
            circumplex: None,
            vocab_max: 512,
            d_model: lm.d_model,
            n_layers: lm.n_layers,
            n_heads: lm.n_heads,
            max_seq_len: lm.max_seq_len,
            lm_steps: lmt.steps,
            lm_batch: lmt.batch_size,
            lm_lr: lmt.lr,
            rm_steps: rm.steps,
            rm_lr: rm.lr,
            rm_mu: rm.mu,
            rm_holdout: rm.holdout,
            pooling: rm.pooling,
            reward_source: RewardSource::Model,
            episodes: ppo.episodes,
            rollouts: ppo.rollouts,
            ppo_epochs: ppo.ppo_epochs,
            minibatch: ppo.minibatch,
            beta0: ppo.beta0,
            beta_mode: ppo.beta_mode,
            kl_target: ppo.kl_target,
            clip_eps: ppo.clip_eps,
            policy_lr: ppo.policy_lr,
            value_lr: ppo.value_lr,
            gamma: ppo.gamma,
            gae_lambda: ppo.gae_lambda,
            max_response_len: ppo.max_response_len,
            temperature: ppo.temperature,
            refresh_reward_model: ppo.refresh_reward_model,
            checkpoint_every: 10,
            prompts: 64,
            lambda: 1.0,
            noise: 0.0,
            eval_samples: 256,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Apply one `key=value` override. The value is read as a TOML value
    /// and falls back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut table = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        table.insert(key.to_string(), value);
        *self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {}", e.message())))?;
        Ok(())
    }

    /// File (if any), then environment, then explicit overrides.
    pub fn resolve(file: Option<&Path>, out: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Ok(dir) = std::env::var(OUT_ENV) {
            if !dir.is_empty() {
                cfg.out_dir = PathBuf::from(dir);
            }
        }
        for o in overrides {
            cfg.set(o)?;
        }
        if let Some(dir) = out {
            cfg.out_dir = dir.to_path_buf();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lm_config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_seq_len: self.max_seq_len,
            dropout: 0.0,
        }
    }

    pub fn lm_train(&self) -> LmTrainConfig {
        LmTrainConfig {
            steps: self.lm_steps,
            batch_size: self.lm_batch,
            lr: self.lm_lr,
            max_grad_norm: 1.0,
            seed: crate::seed::SeedStream::new(self.seed)
                .named("train-lm")
                .seed(),
        }
    }

    pub fn reward_train(&self) -> RewardTrainConfig {
        RewardTrainConfig {
            steps: self.rm_steps,
            lr: self.rm_lr,
            mu: self.rm_mu,
            holdout: self.rm_holdout,
            pooling: self.pooling,
            seed: crate::seed::SeedStream::new(self.seed)
                .named("train-reward")
                .seed(),
        }
    }

    pub fn ppo(&self) -> PpoConfig {
        PpoConfig {
            beta0: self.beta0,
            beta_mode: self.beta_mode,
            kl_target: self.kl_target,
            clip_eps: self.clip_eps,
            policy_lr: self.policy_lr,
            value_lr: self.value_lr,
            episodes: self.episodes,
            rollouts: self.rollouts,
            ppo_epochs: self.ppo_epochs,
            minibatch: self.minibatch,
            gamma: self.gamma,
            gae_lambda: self.gae_lambda,
            max_response_len: self.max_response_len,
            temperature: self.temperature,
            max_grad_norm: 1.0,
            refresh_reward_model: self.refresh_reward_model,
            transcripts: 3,
            seed: crate::seed::SeedStream::new(self.seed).named("ppo").seed(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lm_config(2).validate()?;
        self.ppo().validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_max < 5 {
            return bad(format!("vocab_max must be >= 5, got {}", self.vocab_max));
        }
        if self.lm_batch == 0 {
            return bad("lm_batch must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.rm_holdout) {
            return bad(format!(
                "rm_holdout must be in [0, 1), got {}",
                self.rm_holdout
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must be in [0, 1], got {}", self.lambda));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad(format!("noise must be >= 0, got {}", self.noise));
        }
        if self.prompts == 0 {
            return bad("prompts must be >= 1".into());
        }
        if self.meld.is_none() && self.dialogues == 0 {
            return bad("dialogues must be >= 1".into());
        }
        Ok(())
    }
}
