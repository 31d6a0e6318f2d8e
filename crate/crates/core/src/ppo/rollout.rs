use rand::Rng;

use super::update::ValueHead;
use super::PpoConfig;
use crate::affect::{combine_rewards, sam_to_unit, CircumplexTable};
use crate::error::{Error, Result};
use crate::lm::{PolicyModel, ReferenceSnapshot, SampleOptions};
use crate::reward_model::{
    score, train_reward_model, Pooling, RewardExample, RewardHead, RewardTrainConfig,
};
use crate::seed::SeedStream;
use crate::sim_env::SimUser;
use crate::text::Vocabulary;

pub const BETA_MIN: f64 = 1e-4;
pub const BETA_MAX: f64 = 10.0;

/// One sampled prompt and response with everything the update needs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Rollout {
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
    /// `log pi(y_t | ...)` under the policy that sampled the response.
    pub logp_policy: Vec<f64>,
    /// `log p(y_t | ...)` under the frozen reference.
    pub logp_ref: Vec<f64>,
    /// `-beta * (logp_policy - logp_ref)` per token.
    pub kl_penalty: Vec<f64>,
    /// Terminal reward of the whole response.
    pub reward: f64,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Rollout {
    /// `sum_t (logp_policy - logp_ref)`: a one-sample KL estimate.
    pub fn log_ratio(&self) -> f64 {
        self.logp_policy
            .iter()
            .zip(&self.logp_ref)
            .map(|(a, b)| a - b)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBatch {
    pub rollouts: Vec<Rollout>,
    /// Rollouts dropped because the reward function failed.
    pub failed: usize,
}

/// `r - beta * (logp_policy - logp_ref)`.
pub fn shaped_reward(reward: f64, logp_policy: f64, logp_ref: f64, beta: f64) -> Result<f64> {
    if !logp_policy.is_finite() || !logp_ref.is_finite() {
        return Err(Error::NonFinite(format!(
            "log-probabilities {logp_policy}, {logp_ref}"
        )));
    }
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "beta must be >= 0, got {beta}"
        )));
    }
    Ok(reward - beta * (logp_policy - logp_ref))
}

/// Per-token rewards: the KL penalty everywhere, plus the terminal reward on
/// the last token.
pub fn token_rewards(rollout: &Rollout) -> Vec<f64> {
    let mut r = rollout.kl_penalty.clone();
    if let Some(last) = r.last_mut() {
        *last += rollout.reward;
    }
    r
}

/// Generalised advantage estimation with `V = 0` after the last token.
/// Returns `(advantages, returns)`.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_value = 0.0;
    let mut running = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * next_value - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Mean over rollouts of the summed per-token log ratio, in nats.
pub fn estimate_kl(rollouts: &[Rollout]) -> Result<f64> {
    if rollouts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(rollouts.iter().map(Rollout::log_ratio).sum::<f64>() / rollouts.len() as f64)
}

/// Halve `beta` below `target / 1.5`, double it above `target * 1.5`.
pub fn adapt_beta(beta: f64, measured_kl: f64, kl_target: f64) -> f64 {
    let kl = measured_kl.max(0.0);
    let next = if kl < kl_target / 1.5 {
        beta / 2.0
    } else if kl > kl_target * 1.5 {
        beta * 2.0
    } else {
        beta
    };
    next.clamp(BETA_MIN, BETA_MAX)
}

/// Scalar reward of a finished response.
pub trait RewardFn {
    fn reward(&self, prompt: &[usize], response: &[usize], seed: u64) -> Result<f64>;

    /// Called once per episode when reward refresh is enabled.
    fn refresh(&mut self, _policy: &PolicyModel) -> Result<()> {
        Ok(())
    }
}

impl<F> RewardFn for F
where
    F: Fn(&[usize], &[usize], u64) -> Result<f64>,
{
    fn reward(&self, prompt: &[usize], response: &[usize], seed: u64) -> Result<f64> {
        self(prompt, response, seed)
    }
}

/// The lexicon user's reward for the decoded response.
#[derive(Debug, Clone)]
pub struct OracleReward {
    pub user: SimUser,
    pub vocab: Vocabulary,
}

impl RewardFn for OracleReward {
    fn reward(&self, _prompt: &[usize], response: &[usize], seed: u64) -> Result<f64> {
        Ok(self
            .user
            .respond(&self.vocab.decode(response)?, seed)?
            .reward)
    }
}

/// Learned reward: the head's circumplex score over a frozen body,
/// optionally mixed with the simulated user's self-assessment.
#[derive(Debug, Clone)]
pub struct ModelReward {
    pub body: PolicyModel,
    pub head: RewardHead,
    pub pooling: Pooling,
    /// Supplies the intrinsic term when `user.lambda < 1`.
    pub intrinsic: Option<(SimUser, Vocabulary)>,
    /// Labelled data and settings for per-episode refresh.
    pub refresh_data: Option<(Vec<RewardExample>, CircumplexTable, RewardTrainConfig)>,
}

impl ModelReward {
    pub fn new(body: PolicyModel, head: RewardHead) -> Self {
        Self {
            body,
            head,
            pooling: Pooling::Last,
            intrinsic: None,
            refresh_data: None,
        }
    }
}

impl RewardFn for ModelReward {
    fn reward(&self, prompt: &[usize], response: &[usize], seed: u64) -> Result<f64> {
        let extrinsic = score(&self.body, &self.head, prompt, response, self.pooling)?.reward;
        match &self.intrinsic {
            Some((user, vocab)) if user.lambda < 1.0 => {
                let fb = user.respond(&vocab.decode(response)?, seed)?;
                combine_rewards(extrinsic, sam_to_unit(fb.sam_rating)?, user.lambda)
            }
            _ => Ok(extrinsic),
        }
    }

    fn refresh(&mut self, policy: &PolicyModel) -> Result<()> {
        if let Some((data, table, cfg)) = &self.refresh_data {
            self.body = policy.clone();
            train_reward_model(&self.body, &mut self.head, data, table, cfg)?;
        }
        Ok(())
    }
}

/// Sample `cfg.rollouts` responses, score them and compute advantages.
/// Rollout `i` of episode `e` draws its prompt and sampling seed from the
/// `(seed, e, i)` stream, so batches are reproducible.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts(
    policy: &PolicyModel,
    reference: &ReferenceSnapshot,
    reward_fn: &dyn RewardFn,
    value_head: &ValueHead,
    prompts: &[Vec<usize>],
    beta: f64,
    episode: u64,
    cfg: &PpoConfig,
) -> Result<RolloutBatch> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("no prompts".into()));
    }
    let max_len = policy.config().max_seq_len;
    if let Some(p) = prompts.iter().find(|p| p.is_empty() || p.len() >= max_len) {
        return Err(Error::InvalidArgument(format!(
            "prompt of length {} leaves no room to respond (max_seq_len {max_len})",
            p.len()
        )));
    }
    let opts = SampleOptions {
        max_new: cfg.max_response_len,
        temperature: cfg.temperature,
        top_k: policy.config().vocab_size,
    };
    let stream = SeedStream::new(cfg.seed).named("rollout").child(episode);
    let mut batch = RolloutBatch::default();
    for i in 0..cfg.rollouts {
        let mut rng = stream.child(i as u64).rng();
        let prompt = &prompts[rng.gen_range(0..prompts.len())];
        let response = policy.generate(prompt, &opts, rng.gen())?;
        if response.is_empty() {
            batch.failed += 1;
            continue;
        }
        let reward = match reward_fn.reward(prompt, &response, rng.gen()) {
            Ok(r) if r.is_finite() => r,
            _ => {
                batch.failed += 1;
                continue;
            }
        };
        let (logp_policy, hidden) = {
            let mut tape = crate::autodiff::Tape::new();
            let p = policy.bind(&mut tape, false);
            let (lp, h) = policy.response_log_probs_on(&mut tape, &p, prompt, &response)?;
            (tape.value(lp)?.data().to_vec(), tape.value(h)?.clone())
        };
        let logp_ref = reference.model().token_log_probs(prompt, &response)?;
        let kl_penalty = logp_policy
            .iter()
            .zip(&logp_ref)
            .map(|(&a, &b)| shaped_reward(0.0, a, b, beta))
            .collect::<Result<Vec<_>>>()?;
        let values = value_head.values(&hidden)?;
        let mut r = Rollout {
            prompt: prompt.clone(),
            response,
            logp_policy,
            logp_ref,
            kl_penalty,
            reward,
            values,
            ..Default::default()
        };
        let (adv, ret) = gae(&token_rewards(&r), &r.values, cfg.gamma, cfg.gae_lambda);
        r.advantages = adv;
        r.returns = ret;
        batch.rollouts.push(r);
    }
    Ok(batch)
}
