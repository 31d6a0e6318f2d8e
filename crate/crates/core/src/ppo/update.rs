use rand::seq::SliceRandom;
use serde::Serialize;

use super::rollout::Rollout;
use super::PpoConfig;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lm::{BoundParams, PolicyModel};
use crate::optim::{adam_step, clip_grad_norm, AdamConfig, AdamState};
use crate::seed::SeedStream;
use crate::tensor::Tensor;

/// Checkpoint block names for the value head.
pub const VALUE_WEIGHT_BLOCK: &str = "value_head.weight";
pub const VALUE_BIAS_BLOCK: &str = "value_head.bias";

/// Linear value estimate per position over the policy's hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ValueHead {
    pub fn zeros(d_model: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[d_model, 1]),
            bias: Tensor::zeros(&[1]),
        }
    }

    /// Values for hidden rows `[T, d]`.
    pub fn values(&self, hidden: &Tensor) -> Result<Vec<f64>> {
        let (t, d) = hidden.rows_cols();
        if d != self.weight.shape()[0] {
            return Err(Error::shape(
                "value head",
                format!("hidden width {d}, head expects {}", self.weight.shape()[0]),
            ));
        }
        let w = self.weight.data();
        let b = self.bias.data()[0];
        let out: Vec<f64> = (0..t)
            .map(|r| hidden.row(r).iter().zip(w).map(|(x, w)| x * w).sum::<f64>() + b)
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("value estimate".into()));
        }
        Ok(out)
    }

    fn params(&self) -> [Tensor; 2] {
        [self.weight.clone(), self.bias.clone()]
    }
}

/// Adam moments that persist across episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoOptState {
    pub policy: AdamState,
    pub value: AdamState,
}

impl PpoOptState {
    pub fn new(policy: &PolicyModel, value: &ValueHead) -> Self {
        Self {
            policy: AdamState::new(policy.params()),
            value: AdamState::new(&value.params()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct UpdateStats {
    /// Mean clipped-surrogate loss per token.
    pub surrogate_loss: f64,
    /// Mean squared value error per token.
    pub value_loss: f64,
    /// Fraction of tokens whose ratio left `[1 - eps, 1 + eps]`.
    pub clip_fraction: f64,
    /// Mean `logp_old - logp_new` per token, as seen during the last epoch.
    pub policy_shift: f64,
}

/// Normalise to zero mean and unit variance across all tokens. Left
/// untouched when the variance is zero.
pub fn whiten(advantages: &mut [Vec<f64>]) {
    let n: usize = advantages.iter().map(Vec::len).sum();
    if n == 0 {
        return;
    }
    let mean = advantages.iter().flatten().sum::<f64>() / n as f64;
    let var = advantages
        .iter()
        .flatten()
        .map(|a| (a - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    if !(std > 1e-12) {
        return;
    }
    for a in advantages.iter_mut().flatten() {
        *a = (*a - mean) / std;
    }
}

/// `-sum_t min(rho_t * A_t, clip(rho_t) * A_t) / denom` with
/// `rho_t = exp(logp_new - logp_old)`. Also returns the new log-probs and
/// the hidden rows used for value prediction.
pub fn surrogate_loss_on(
    tape: &mut Tape,
    policy: &PolicyModel,
    params: &BoundParams,
    rollout: &Rollout,
    advantages: &[f64],
    clip_eps: f64,
    denom: f64,
) -> Result<(Var, Var, Var)> {
    let (lp, hidden) =
        policy.response_log_probs_on(tape, params, &rollout.prompt, &rollout.response)?;
    let old = tape.constant(Tensor::vector(rollout.logp_policy.clone()));
    let adv = tape.constant(Tensor::vector(advantages.to_vec()));
    let diff = tape.sub(lp, old)?;
    let ratio = tape.exp(diff)?;
    let unclipped = tape.mul(ratio, adv)?;
    let clipped = tape.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps)?;
    let clipped = tape.mul(clipped, adv)?;
    let obj = tape.minimum(unclipped, clipped)?;
    let total = tape.sum(obj)?;
    let loss = tape.scale(total, -1.0 / denom)?;
    Ok((loss, lp, hidden))
}

/// `ppo_epochs` passes of minibatch clipped-surrogate steps on the policy
/// and squared-error steps on the value head. The value head reads detached
/// hidden states, so its loss never reaches the policy.
pub fn ppo_update(
    policy: &mut PolicyModel,
    value_head: &mut ValueHead,
    rollouts: &[Rollout],
    state: &mut PpoOptState,
    episode: u64,
    cfg: &PpoConfig,
) -> Result<UpdateStats> {
    if rollouts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut advantages: Vec<Vec<f64>> = rollouts.iter().map(|r| r.advantages.clone()).collect();
    whiten(&mut advantages);
    let policy_adam = AdamConfig::with_lr(cfg.policy_lr);
    let value_adam = AdamConfig::with_lr(cfg.value_lr);
    let stream = SeedStream::new(cfg.seed)
        .named("ppo-minibatch")
        .child(episode);

    let mut stats = UpdateStats::default();
    let mut order: Vec<usize> = (0..rollouts.len()).collect();
    for epoch in 0..cfg.ppo_epochs {
        order.shuffle(&mut stream.child(epoch as u64).rng());
        let last_epoch = epoch + 1 == cfg.ppo_epochs;
        let (mut surr, mut vloss, mut clipped, mut shift, mut tokens) =
            (0.0, 0.0, 0usize, 0.0, 0usize);
        for mb in order.chunks(cfg.minibatch) {
            let denom = mb
                .iter()
                .map(|&i| rollouts[i].response.len())
                .sum::<usize>() as f64;
            let mut pgrads: Vec<Tensor> = policy
                .params()
                .iter()
                .map(Tensor::same_shape_zeros)
                .collect();
            let mut vgrads = value_head.params().map(|t| t.same_shape_zeros());
            let mut tape = Tape::new();
            for &i in mb {
                let r = &rollouts[i];
                let p = policy.bind(&mut tape, true);
                let (pl, lp, hidden) = surrogate_loss_on(
                    &mut tape,
                    policy,
                    &p,
                    r,
                    &advantages[i],
                    cfg.clip_eps,
                    denom,
                )?;
                let h = tape.detach(hidden)?;
                let wv = tape.param(value_head.weight.clone());
                let bv = tape.param(value_head.bias.clone());
                let v = tape.matmul(h, wv)?;
                let v = tape.add_bias(v, bv)?;
                let target =
                    tape.constant(Tensor::new(vec![r.returns.len(), 1], r.returns.clone())?);
                let err = tape.sub(v, target)?;
                let sq = tape.square(err)?;
                let se = tape.sum(sq)?;
                let vl = tape.scale(se, 0.5 / denom)?;
                let loss = tape.add(pl, vl)?;

                let pl_v = tape.value(pl)?.item();
                let vl_v = tape.value(vl)?.item();
                if !pl_v.is_finite() || !vl_v.is_finite() {
                    return Err(Error::NonFinite("PPO loss".into()));
                }
                surr += pl_v * denom;
                vloss += 2.0 * vl_v * denom;
                for (new, old) in tape.value(lp)?.data().iter().zip(&r.logp_policy) {
                    let ratio = (new - old).exp();
                    if (ratio - 1.0).abs() > cfg.clip_eps {
                        clipped += 1;
                    }
                    shift += old - new;
                }
                tokens += r.response.len();

                let mut g = tape.backward(loss)?;
                for (acc, &v) in pgrads.iter_mut().zip(p.vars()) {
                    if let Some(gv) = g.take(v) {
                        acc.add_assign(&gv);
                    }
                }
                for (acc, v) in vgrads.iter_mut().zip([wv, bv]) {
                    if let Some(gv) = g.take(v) {
                        acc.add_assign(&gv);
                    }
                }
            }
            clip_grad_norm(&mut pgrads, cfg.max_grad_norm);
            adam_step(
                policy.params_mut(),
                &pgrads,
                &mut state.policy,
                &policy_adam,
            )?;
            let mut vparams = value_head.params();
            adam_step(&mut vparams, &vgrads, &mut state.value, &value_adam)?;
            let [w, b] = vparams;
            value_head.weight = w;
            value_head.bias = b;
        }
        if last_epoch {
            let n = tokens.max(1) as f64;
            stats = UpdateStats {
                surrogate_loss: surr / n,
                value_loss: vloss / n,
                clip_fraction: clipped as f64 / n,
                policy_shift: shift / n,
            };
        }
    }
    if policy.params().iter().any(|p| !p.all_finite()) {
        return Err(Error::NonFinite("policy parameters after update".into()));
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn whitening_and_zero_variance_guard() {
        let mut a = vec![vec![1.0, 2.0], vec![3.0]];
        whiten(&mut a);
        let flat: Vec<f64> = a.concat();
        assert!(flat.iter().sum::<f64>().abs() < 1e-12);
        let var = flat.iter().map(|x| x * x).sum::<f64>() / 3.0;
        assert!((var - 1.0).abs() < 1e-12);
        let mut same = vec![vec![0.7, 0.7], vec![0.7]];
        whiten(&mut same);
        assert_eq!(same, vec![vec![0.7, 0.7], vec![0.7]]);
    }

    #[test]
    fn value_head_shapes() {
        let v = ValueHead {
            weight: Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap(),
            bias: Tensor::vector(vec![0.5]),
        };
        let h = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 1.0]).unwrap();
        assert_eq!(v.values(&h).unwrap(), vec![-0.5, 2.5]);
        assert!(v.values(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn zero_advantages_do_not_move_the_policy() {
        let cfg = LmConfig {
            vocab_size: 10,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 12,
            dropout: 0.0,
        };
        let mut policy = PolicyModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let before = policy.clone();
        let r = Rollout {
            prompt: vec![2, 5],
            response: vec![6, 7, 3],
            logp_policy: policy.token_log_probs(&[2, 5], &[6, 7, 3]).unwrap(),
            advantages: vec![0.0; 3],
            returns: vec![1.0; 3],
            ..Default::default()
        };
        let mut value = ValueHead::zeros(8);
        let mut state = PpoOptState::new(&policy, &value);
        let stats = ppo_update(
            &mut policy,
            &mut value,
            &[r],
            &mut state,
            0,
            &PpoConfig::default(),
        )
        .unwrap();
        assert_eq!(policy, before);
        assert_ne!(value, ValueHead::zeros(8));
        assert_eq!(stats.clip_fraction, 0.0);
    }
}
