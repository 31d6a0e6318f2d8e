//! Emotion and affect head on top of the language model's hidden states.
//!
//! The head maps a pooled `d_model` embedding to 9 outputs: 7 emotion logits
//! followed by arousal and valence, the latter two squashed with `tanh`. The
//! scalar reward of a response is the circumplex reward of its predicted
//! point. Training minimises cross-entropy on the gold label plus `mu` times
//! the squared error between the predicted point and the gold label's table
//! coordinates; the language model itself is never modified.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::affect::{circumplex_reward, AffectPoint, CircumplexTable, EmotionLabel};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lm::{PolicyModel, TrainPair};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::seed::SeedStream;
use crate::tensor::{softmax, Tensor};
use crate::text::{context_pairs, encode_prompt, encode_response, Utterance, Vocabulary};

pub const HEAD_OUTPUTS: usize = 9;
const N_EMOTIONS: usize = 7;

/// Checkpoint block names for the head.
pub const WEIGHT_BLOCK: &str = "reward_head.weight";
pub const BIAS_BLOCK: &str = "reward_head.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Hidden state at the final response token.
    #[default]
    Last,
    /// Mean of the hidden states over the response tokens.
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardHead {
    weight: Tensor,
    bias: Tensor,
}

impl RewardHead {
    pub fn zeros(d_model: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[d_model, HEAD_OUTPUTS]),
            bias: Tensor::zeros(&[HEAD_OUTPUTS]),
        }
    }

    pub fn new<R: Rng + ?Sized>(d_model: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[d_model, HEAD_OUTPUTS], 0.02, rng),
            bias: Tensor::zeros(&[HEAD_OUTPUTS]),
        }
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || weight.shape()[1] != HEAD_OUTPUTS {
            return Err(Error::shape(
                "reward head",
                format!(
                    "weight must be [d, {HEAD_OUTPUTS}], got {:?}",
                    weight.shape()
                ),
            ));
        }
        if bias.shape() != [HEAD_OUTPUTS] {
            return Err(Error::shape(
                "reward head",
                format!("bias must be [{HEAD_OUTPUTS}], got {:?}", bias.shape()),
            ));
        }
        if !weight.all_finite() || !bias.all_finite() {
            return Err(Error::NonFinite("reward head parameters".into()));
        }
        Ok(Self { weight, bias })
    }

    pub fn d_model(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// `(emotion weight [d,7], emotion bias [7], affect weight [d,2], affect bias [2])`.
    fn split(&self) -> [Tensor; 4] {
        let d = self.d_model();
        let w = self.weight.data();
        let b = self.bias.data();
        let mut we = Vec::with_capacity(d * N_EMOTIONS);
        let mut wa = Vec::with_capacity(d * 2);
        for r in 0..d {
            let row = &w[r * HEAD_OUTPUTS..(r + 1) * HEAD_OUTPUTS];
            we.extend_from_slice(&row[..N_EMOTIONS]);
            wa.extend_from_slice(&row[N_EMOTIONS..]);
        }
        [
            Tensor::new(vec![d, N_EMOTIONS], we).expect("shape"),
            Tensor::vector(b[..N_EMOTIONS].to_vec()),
            Tensor::new(vec![d, 2], wa).expect("shape"),
            Tensor::vector(b[N_EMOTIONS..].to_vec()),
        ]
    }

    fn join(parts: &[Tensor]) -> Self {
        let d = parts[0].shape()[0];
        let mut w = Vec::with_capacity(d * HEAD_OUTPUTS);
        for r in 0..d {
            w.extend_from_slice(parts[0].row(r));
            w.extend_from_slice(parts[2].row(r));
        }
        let mut b = parts[1].data().to_vec();
        b.extend_from_slice(parts[3].data());
        Self {
            weight: Tensor::new(vec![d, HEAD_OUTPUTS], w).expect("shape"),
            bias: Tensor::vector(b),
        }
    }

    fn check(&self, d_model: usize) -> Result<()> {
        if self.d_model() != d_model {
            return Err(Error::shape(
                "reward head",
                format!(
                    "head expects d_model {}, model has {d_model}",
                    self.d_model()
                ),
            ));
        }
        Ok(())
    }

    /// Raw outputs for one embedding: 7 logits then `tanh` arousal, valence.
    pub fn outputs(&self, embedding: &[f64]) -> Result<[f64; HEAD_OUTPUTS]> {
        self.check(embedding.len())?;
        let mut out = [0.0; HEAD_OUTPUTS];
        out.copy_from_slice(self.bias.data());
        for (r, &x) in embedding.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.weight.row(r)) {
                *o += x * w;
            }
        }
        out[N_EMOTIONS] = out[N_EMOTIONS].tanh();
        out[N_EMOTIONS + 1] = out[N_EMOTIONS + 1].tanh();
        Ok(out)
    }

    /// Score a pooled embedding.
    pub fn score_embedding(&self, embedding: &[f64]) -> Result<RewardScore> {
        let out = self.outputs(embedding)?;
        let p = softmax(&out[..N_EMOTIONS])?;
        let mut probs = [0.0; N_EMOTIONS];
        probs.copy_from_slice(&p);
        let point = AffectPoint::clamped(out[N_EMOTIONS], out[N_EMOTIONS + 1]);
        Ok(RewardScore {
            probs,
            point,
            reward: circumplex_reward(point),
        })
    }
}

/// Bound head parameters: emotion weight, emotion bias, affect weight, affect bias.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars(pub [Var; 4]);

/// Emotion logits `[n, 7]` and `tanh` affect predictions `[n, 2]`.
pub fn head_forward_on(tape: &mut Tape, h: &HeadVars, features: Var) -> Result<(Var, Var)> {
    let [we, be, wa, ba] = h.0;
    let logits = tape.matmul(features, we)?;
    let logits = tape.add_bias(logits, be)?;
    let av = tape.matmul(features, wa)?;
    let av = tape.add_bias(av, ba)?;
    let av = tape.tanh(av)?;
    Ok((logits, av))
}

/// Mean cross-entropy plus `mu` times the mean squared distance between
/// predicted and target points.
pub fn head_loss_on(
    tape: &mut Tape,
    h: &HeadVars,
    features: Var,
    labels: &[usize],
    targets: &Tensor,
    mu: f64,
) -> Result<Var> {
    let (logits, av) = head_forward_on(tape, h, features)?;
    let ce = tape.cross_entropy(logits, labels)?;
    let t = tape.constant(targets.clone());
    let diff = tape.sub(av, t)?;
    let sq = tape.square(diff)?;
    let se = tape.sum(sq)?;
    let mse = tape.scale(se, mu / labels.len() as f64)?;
    tape.add(ce, mse)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RewardScore {
    /// Emotion distribution in [`EmotionLabel::ALL`] order.
    pub probs: [f64; 7],
    pub point: AffectPoint,
    pub reward: f64,
}

impl RewardScore {
    pub fn label(&self) -> EmotionLabel {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        EmotionLabel::ALL[best]
    }
}

/// Pooled final-layer hidden state of `prompt ++ response`.
pub fn pool_embedding(
    model: &PolicyModel,
    prompt: &[usize],
    response: &[usize],
    pooling: Pooling,
) -> Result<Vec<f64>> {
    if response.is_empty() {
        return Err(Error::EmptyResponse);
    }
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(response);
    let h = model.forward_hidden(&tokens)?;
    let d = model.config().d_model;
    match pooling {
        Pooling::Last => Ok(h.row(tokens.len() - 1).to_vec()),
        Pooling::Mean => {
            let mut acc = vec![0.0; d];
            for r in prompt.len()..tokens.len() {
                for (a, x) in acc.iter_mut().zip(h.row(r)) {
                    *a += x;
                }
            }
            let n = response.len() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
            Ok(acc)
        }
    }
}

pub fn score(
    model: &PolicyModel,
    head: &RewardHead,
    prompt: &[usize],
    response: &[usize],
    pooling: Pooling,
) -> Result<RewardScore> {
    head.check(model.config().d_model)?;
    head.score_embedding(&pool_embedding(model, prompt, response, pooling)?)
}

/// A labelled `(context, utterance)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardExample {
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
    pub label: EmotionLabel,
}

/// One example per utterance, with the previous utterance as context.
pub fn build_reward_dataset(
    utterances: &[Utterance],
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Vec<RewardExample> {
    context_pairs(utterances)
        .into_iter()
        .map(|(prev, cur)| {
            let pair = TrainPair::fitted(
                encode_prompt(vocab, prev.map(|i| utterances[i].text.as_str())),
                encode_response(vocab, &utterances[cur].text),
                max_seq_len,
            );
            RewardExample {
                prompt: pair.prompt,
                response: pair.response,
                label: utterances[cur].emotion,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardTrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Weight of the affect regression term.
    pub mu: f64,
    /// Fraction of examples held out for evaluation.
    pub holdout: f64,
    pub pooling: Pooling,
    pub seed: u64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 0.01,
            mu: 1.0,
            holdout: 0.2,
            pooling: Pooling::Last,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardTrainReport {
    /// Full-batch training loss before each step.
    pub losses: Vec<f64>,
    pub train_examples: usize,
    pub heldout_examples: usize,
    /// Emotion accuracy on the held-out split (training split if none is held out).
    pub accuracy: f64,
    /// Mean absolute error of predicted arousal and valence against table targets.
    pub affect_mae: f64,
}

/// Fit the head on frozen-model embeddings of `dataset`.
pub fn train_reward_model(
    model: &PolicyModel,
    head: &mut RewardHead,
    dataset: &[RewardExample],
    table: &CircumplexTable,
    cfg: &RewardTrainConfig,
) -> Result<RewardTrainReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    head.check(model.config().d_model)?;
    let mut features = Vec::with_capacity(dataset.len());
    for ex in dataset {
        features.push(pool_embedding(
            model,
            &ex.prompt,
            &ex.response,
            cfg.pooling,
        )?);
    }
    let labels: Vec<EmotionLabel> = dataset.iter().map(|e| e.label).collect();
    train_head_on_embeddings(head, &features, &labels, table, cfg)
}

/// Fit the head directly on precomputed embeddings.
pub fn train_head_on_embeddings(
    head: &mut RewardHead,
    features: &[Vec<f64>],
    labels: &[EmotionLabel],
    table: &CircumplexTable,
    cfg: &RewardTrainConfig,
) -> Result<RewardTrainReport> {
    if features.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if features.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} embeddings but {} labels",
            features.len(),
            labels.len()
        )));
    }
    if !(0.0..1.0).contains(&cfg.holdout) {
        return Err(Error::InvalidArgument(format!(
            "holdout must be in [0, 1), got {}",
            cfg.holdout
        )));
    }
    let d = head.d_model();
    if let Some(f) = features.iter().find(|f| f.len() != d) {
        return Err(Error::shape(
            "reward head",
            format!("embedding of length {}, head expects {d}", f.len()),
        ));
    }
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(&mut SeedStream::new(cfg.seed).named("reward-split").rng());
    let n_hold = ((features.len() as f64) * cfg.holdout).floor() as usize;
    let (held, train) = order.split_at(n_hold);
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let gather = |idx: &[usize]| -> (Tensor, Vec<usize>, Tensor) {
        let mut x = Vec::with_capacity(idx.len() * d);
        let mut t = Vec::with_capacity(idx.len() * 2);
        for &i in idx {
            x.extend_from_slice(&features[i]);
            let p = table.point(labels[i]);
            t.extend_from_slice(&[p.arousal(), p.valence()]);
        }
        (
            Tensor::new(vec![idx.len(), d], x).expect("shape"),
            idx.iter().map(|&i| labels[i].index()).collect(),
            Tensor::new(vec![idx.len(), 2], t).expect("shape"),
        )
    };
    let (x, y, t) = gather(train);

    let mut parts = head.split().to_vec();
    let mut state = AdamState::new(&parts);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut tape = Tape::new();
    for _ in 0..cfg.steps {
        let vars: Vec<Var> = parts.iter().map(|p| tape.param(p.clone())).collect();
        let h = HeadVars([vars[0], vars[1], vars[2], vars[3]]);
        let xv = tape.constant(x.clone());
        let loss = head_loss_on(&mut tape, &h, xv, &y, &t, cfg.mu)?;
        let l = tape.value(loss)?.item();
        if !l.is_finite() {
            return Err(Error::NonFinite("reward-model training loss".into()));
        }
        losses.push(l);
        let mut g = tape.backward(loss)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .zip(&parts)
            .map(|(&v, p)| g.take(v).unwrap_or_else(|| p.same_shape_zeros()))
            .collect();
        adam_step(&mut parts, &grads, &mut state, &adam)?;
    }
    if cfg.steps > 0 {
        *head = RewardHead::join(&parts);
    }

    let eval_idx = if held.is_empty() { train } else { held };
    let mut correct = 0usize;
    let mut abs_err = 0.0;
    for &i in eval_idx {
        let s = head.score_embedding(&features[i])?;
        if s.label() == labels[i] {
            correct += 1;
        }
        let target = table.point(labels[i]);
        abs_err += (s.point.arousal() - target.arousal()).abs()
            + (s.point.valence() - target.valence()).abs();
    }
    let n = eval_idx.len() as f64;
    Ok(RewardTrainReport {
        losses,
        train_examples: train.len(),
        heldout_examples: held.len(),
        accuracy: correct as f64 / n,
        affect_mae: abs_err / (2.0 * n),
    })
}

/// `n` embeddings in `dim` dimensions drawn around 7 well-separated
/// centres, one per label, cycling through labels.
pub fn separable_clusters(
    n: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<EmotionLabel>) {
    let mut rng = SeedStream::new(seed).named("clusters").rng();
    let centres: Vec<Tensor> = (0..N_EMOTIONS)
        .map(|_| Tensor::randn(&[dim], 1.0, &mut rng))
        .collect();
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let label = EmotionLabel::ALL[i % N_EMOTIONS];
        let noise = Tensor::randn(&[dim], spread, &mut rng);
        xs.push(
            centres[label.index()]
                .data()
                .iter()
                .zip(noise.data())
                .map(|(c, e)| c + e)
                .collect(),
        );
        ys.push(label);
    }
    (xs, ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::lm::LmConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> PolicyModel {
        let cfg = LmConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 16,
            dropout: 0.0,
        };
        PolicyModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn zero_head_scores_uniform_and_neutral() {
        let m = tiny_model();
        let s = score(&m, &RewardHead::zeros(8), &[2, 5], &[6, 3], Pooling::Last).unwrap();
        for p in s.probs {
            assert!((p - 1.0 / 7.0).abs() < 1e-12);
        }
        assert_eq!(s.point, AffectPoint::ORIGIN);
        assert_eq!(s.reward, 0.0);
    }

    #[test]
    fn reward_equals_circumplex_of_point() {
        let m = tiny_model();
        let head = RewardHead::new(8, &mut ChaCha8Rng::seed_from_u64(3));
        for resp in [&[4usize][..], &[4, 7], &[9, 9, 3]] {
            let s = score(&m, &head, &[2], resp, Pooling::Mean).unwrap();
            assert!((s.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((s.reward - circumplex_reward(s.point)).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_shapes_and_errors() {
        let m = tiny_model();
        let a = pool_embedding(&m, &[2, 4], &[5], Pooling::Last).unwrap();
        let b = pool_embedding(&m, &[2, 4], &[5, 6], Pooling::Last).unwrap();
        assert_eq!(a.len(), 8);
        assert_ne!(a, b);
        assert_eq!(a, pool_embedding(&m, &[2, 4], &[5], Pooling::Last).unwrap());
        assert!(matches!(
            pool_embedding(&m, &[2], &[], Pooling::Last),
            Err(Error::EmptyResponse)
        ));
        assert!(score(&m, &RewardHead::zeros(9), &[2], &[4], Pooling::Last).is_err());
    }

    #[test]
    fn split_join_roundtrip() {
        let head = RewardHead::new(5, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(RewardHead::join(&head.split()), head);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = RewardHead::new(6, &mut rng);
        let x = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let labels = [0, 3, 6, 3, 1];
        let t = Tensor::uniform(&[5, 2], -0.8, 0.8, &mut rng);
        let mut params = head.split().to_vec();
        params.push(x);
        let err = grad_check(
            |tape, v| {
                let h = HeadVars([v[0], v[1], v[2], v[3]]);
                head_loss_on(tape, &h, v[4], &labels, &t, 1.0)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn zero_steps_leave_head_unchanged() {
        let (x, y) = separable_clusters(70, 6, 0.1, 2);
        let mut head = RewardHead::new(6, &mut ChaCha8Rng::seed_from_u64(5));
        let before = head.clone();
        let cfg = RewardTrainConfig {
            steps: 0,
            ..Default::default()
        };
        train_head_on_embeddings(&mut head, &x, &y, &CircumplexTable::default(), &cfg).unwrap();
        assert_eq!(head, before);
    }

    #[test]
    fn joy_only_regresses_to_joy_point() {
        let (x, _) = separable_clusters(200, 6, 0.3, 6);
        let y = vec![EmotionLabel::Joy; x.len()];
        let mut head = RewardHead::zeros(6);
        let table = CircumplexTable::default();
        let r = train_head_on_embeddings(&mut head, &x, &y, &table, &RewardTrainConfig::default())
            .unwrap();
        assert!(r.affect_mae < 0.05, "{r:?}");
        let joy = table.point(EmotionLabel::Joy);
        let s = head.score_embedding(&x[0]).unwrap();
        assert!((s.point.arousal() - joy.arousal()).abs() < 0.05);
        assert!((s.point.valence() - joy.valence()).abs() < 0.05);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let mut head = RewardHead::zeros(4);
        let table = CircumplexTable::default();
        let cfg = RewardTrainConfig::default();
        assert!(matches!(
            train_head_on_embeddings(&mut head, &[], &[], &table, &cfg),
            Err(Error::EmptyDataset)
        ));
        assert!(train_head_on_embeddings(&mut head, &[vec![0.0; 4]], &[], &table, &cfg).is_err());
        assert!(train_head_on_embeddings(
            &mut head,
            &[vec![0.0; 3]],
            &[EmotionLabel::Joy],
            &table,
            &cfg
        )
        .is_err());
        let m = tiny_model();
        assert!(matches!(
            train_reward_model(&m, &mut RewardHead::zeros(8), &[], &table, &cfg),
            Err(Error::EmptyDataset)
        ));
    }
}
