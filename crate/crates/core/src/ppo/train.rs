use serde::Serialize;

use super::rollout::{adapt_beta, collect_rollouts, estimate_kl, RewardFn};
use super::update::{ppo_update, PpoOptState, ValueHead};
use super::{BetaMode, PpoConfig};
use crate::error::{Error, Result};
use crate::lm::{PolicyModel, ReferenceSnapshot};
use crate::sim_env::SimUser;
use crate::text::Vocabulary;

/// Prompts, plus an optional lexicon judge for monitoring. The judge never
/// feeds the update; it only adds oracle columns to the records.
#[derive(Debug, Clone)]
pub struct PpoEnv {
    pub prompts: Vec<Vec<usize>>,
    pub vocab: Option<Vocabulary>,
    pub judge: Option<SimUser>,
}

impl PpoEnv {
    pub fn new(prompts: Vec<Vec<usize>>) -> Self {
        Self {
            prompts,
            vocab: None,
            judge: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Transcript {
    pub prompt: String,
    pub response: String,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    /// Mean terminal reward of this episode's rollouts.
    pub mean_reward: f64,
    /// Mean summed log ratio to the reference, in nats per sequence.
    pub mean_kl: f64,
    /// Coefficient used to shape this episode's rewards.
    pub beta: f64,
    pub clip_fraction: f64,
    pub surrogate_loss: f64,
    pub value_loss: f64,
    pub policy_shift: f64,
    pub mean_response_len: f64,
    pub failed_rollouts: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_reward: Option<f64>,
    /// Share of responses the judge labels with positive valence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positive_fraction: Option<f64>,
    pub samples: Vec<Transcript>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoHistory {
    pub records: Vec<EpisodeRecord>,
    pub value_head: ValueHead,
    pub final_beta: f64,
}

/// Run `cfg.episodes` episodes of collect, optional reward refresh, update
/// and `beta` adaptation. `on_episode` sees every record together with the
/// updated policy. On a non-finite loss the policy is restored to its state
/// before the failing update and the error is returned.
pub fn train<F>(
    policy: &mut PolicyModel,
    reference: &ReferenceSnapshot,
    reward_fn: &mut dyn RewardFn,
    env: &PpoEnv,
    cfg: &PpoConfig,
    mut on_episode: F,
) -> Result<PpoHistory>
where
    F: FnMut(&EpisodeRecord, &PolicyModel) -> Result<()>,
{
    cfg.validate()?;
    if reference.model().config() != policy.config() {
        return Err(Error::InvalidArgument(
            "reference and policy configs differ".into(),
        ));
    }
    let mut value_head = ValueHead::zeros(policy.config().d_model);
    let mut state = PpoOptState::new(policy, &value_head);
    let mut beta = cfg.beta0;
    let mut records = Vec::with_capacity(cfg.episodes);
    for episode in 0..cfg.episodes {
        let batch = collect_rollouts(
            policy,
            reference,
            &*reward_fn,
            &value_head,
            &env.prompts,
            beta,
            episode as u64,
            cfg,
        )?;
        if batch.rollouts.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "episode {episode}: all {} rollouts failed",
                batch.failed
            )));
        }
        if cfg.refresh_reward_model {
            reward_fn.refresh(policy)?;
        }
        let last_good = policy.clone();
        let stats = match ppo_update(
            policy,
            &mut value_head,
            &batch.rollouts,
            &mut state,
            episode as u64,
            cfg,
        ) {
            Ok(s) => s,
            Err(e) => {
                *policy = last_good;
                return Err(e);
            }
        };
        let mean_kl = estimate_kl(&batch.rollouts)?;
        if !mean_kl.is_finite() {
            *policy = last_good;
            return Err(Error::NonFinite(format!(
                "measured KL in episode {episode}"
            )));
        }
        let n = batch.rollouts.len() as f64;
        let mean_reward = batch.rollouts.iter().map(|r| r.reward).sum::<f64>() / n;
        let mean_response_len = batch
            .rollouts
            .iter()
            .map(|r| r.response.len())
            .sum::<usize>() as f64
            / n;

        let (mut oracle_reward, mut positive_fraction, mut samples) = (None, None, Vec::new());
        if let Some(vocab) = &env.vocab {
            if let Some(judge) = &env.judge {
                let (mut total, mut positive) = (0.0, 0usize);
                for (i, r) in batch.rollouts.iter().enumerate() {
                    let fb = judge.respond(&vocab.decode(&r.response)?, i as u64)?;
                    total += fb.reward;
                    if fb.label.valence_sign() > 0 {
                        positive += 1;
                    }
                }
                oracle_reward = Some(total / n);
                positive_fraction = Some(positive as f64 / n);
            }
            for r in batch.rollouts.iter().take(cfg.transcripts) {
                samples.push(Transcript {
                    prompt: vocab.decode(&r.prompt)?,
                    response: vocab.decode(&r.response)?,
                    reward: r.reward,
                });
            }
        }

        let record = EpisodeRecord {
            episode,
            mean_reward,
            mean_kl,
            beta,
            clip_fraction: stats.clip_fraction,
            surrogate_loss: stats.surrogate_loss,
            value_loss: stats.value_loss,
            policy_shift: stats.policy_shift,
            mean_response_len,
            failed_rollouts: batch.failed,
            oracle_reward,
            positive_fraction,
            samples,
        };
        on_episode(&record, policy)?;
        records.push(record);
        if cfg.beta_mode == BetaMode::Adaptive {
            beta = adapt_beta(beta, mean_kl, cfg.kl_target);
        }
    }
    Ok(PpoHistory {
        records,
        value_head,
        final_beta: beta,
    })
}
