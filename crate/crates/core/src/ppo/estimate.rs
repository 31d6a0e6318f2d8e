use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::rollout::RewardFn;
use crate::error::{Error, Result};
use crate::lm::{PolicyModel, SampleOptions};
use crate::seed::SeedStream;

/// Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

/// Mean of `sample(i, rng)` over `n` draws, each with its own seeded stream.
pub fn expected_reward<F>(n: usize, seed: u64, mut sample: F) -> Result<Estimate>
where
    F: FnMut(usize, &mut ChaCha8Rng) -> Result<f64>,
{
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let stream = SeedStream::new(seed).named("expected-reward");
    let mut xs = Vec::with_capacity(n);
    for i in 0..n {
        let x = sample(i, &mut stream.child(i as u64).rng())?;
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("reward of sample {i}")));
        }
        xs.push(x);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std_err = if n > 1 {
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Ok(Estimate { mean, std_err, n })
}

/// Expected reward of `policy` over prompts drawn uniformly from `prompts`.
pub fn policy_expected_reward(
    policy: &PolicyModel,
    prompts: &[Vec<usize>],
    reward_fn: &dyn RewardFn,
    opts: &SampleOptions,
    n: usize,
    seed: u64,
) -> Result<Estimate> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("no prompts".into()));
    }
    expected_reward(n, seed, |_, rng| {
        let prompt = &prompts[rng.gen_range(0..prompts.len())];
        let response = policy.generate(prompt, opts, rng.gen())?;
        reward_fn.reward(prompt, &response, rng.gen())
    })
}

/// Sequence KL from `policy` to `reference`: the summed log ratio of
/// responses sampled from the policy, averaged over `n` samples.
pub fn measure_kl(
    policy: &PolicyModel,
    reference: &PolicyModel,
    prompts: &[Vec<usize>],
    opts: &SampleOptions,
    n: usize,
    seed: u64,
) -> Result<Estimate> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("no prompts".into()));
    }
    expected_reward(n, seed, |_, rng| {
        let prompt = &prompts[rng.gen_range(0..prompts.len())];
        let response = policy.generate(prompt, opts, rng.gen())?;
        if response.is_empty() {
            return Ok(0.0);
        }
        Ok(policy.sequence_log_prob(prompt, &response)?
            - reference.sequence_log_prob(prompt, &response)?)
    })
}
