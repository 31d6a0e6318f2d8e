//! Decoder-only transformer language model.
//!
//! Pre-norm blocks (causal multi-head self-attention, GELU feed-forward),
//! learned positional embeddings and an untied output projection. The model
//! assigns `log p(y | x)` by the chain rule over response tokens and samples
//! responses for the fine-tuning loop.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{adam_step, clip_grad_norm, AdamConfig, AdamState};
use crate::seed::SeedStream;
use crate::tensor::{self, Tensor};
use crate::text::EOS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl LmConfig {
    /// 2 layers, d_model 64, 4 heads, context 64.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 64,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 {
            return bad("n_layers must be >= 1".into());
        }
        if self.max_seq_len < 2 {
            return bad(format!("max_seq_len {} < 2", self.max_seq_len));
        }
        if self.dropout != 0.0 {
            return bad("dropout is not supported; use 0".into());
        }
        Ok(())
    }
}

const PER_LAYER: usize = 16;
// Offsets inside one layer's parameter block.
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const BQ: usize = 3;
const WK: usize = 4;
const BK: usize = 5;
const WV: usize = 6;
const BV: usize = 7;
const WO: usize = 8;
const BO: usize = 9;
const LN2_G: usize = 10;
const LN2_B: usize = 11;
const W1: usize = 12;
const B1: usize = 13;
const W2: usize = 14;
const B2: usize = 15;

/// Names and shapes of every parameter tensor, in storage order.
pub fn param_layout(cfg: &LmConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, l) = (cfg.vocab_size, cfg.d_model, cfg.max_seq_len);
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d]),
        ("pos_emb".to_string(), vec![l, d]),
    ];
    for i in 0..cfg.n_layers {
        let p = |n: &str| format!("block{i}.{n}");
        out.extend([
            (p("ln1.gamma"), vec![d]),
            (p("ln1.beta"), vec![d]),
            (p("attn.wq"), vec![d, d]),
            (p("attn.bq"), vec![d]),
            (p("attn.wk"), vec![d, d]),
            (p("attn.bk"), vec![d]),
            (p("attn.wv"), vec![d, d]),
            (p("attn.bv"), vec![d]),
            (p("attn.wo"), vec![d, d]),
            (p("attn.bo"), vec![d]),
            (p("ln2.gamma"), vec![d]),
            (p("ln2.beta"), vec![d]),
            (p("mlp.w1"), vec![d, 4 * d]),
            (p("mlp.b1"), vec![4 * d]),
            (p("mlp.w2"), vec![4 * d, d]),
            (p("mlp.b2"), vec![d]),
        ]);
    }
    out.extend([
        ("ln_f.gamma".to_string(), vec![d]),
        ("ln_f.beta".to_string(), vec![d]),
        ("lm_head".to_string(), vec![d, v]),
    ]);
    out
}

/// The trainable language model: the policy during fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    config: LmConfig,
    params: Vec<Tensor>,
}

/// Handles of a model's parameters bound to one tape.
#[derive(Debug, Clone)]
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    /// Wrap handles already on a tape, in [`param_layout`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Final hidden states `[T, d]` and next-token logits `[T, vocab]`.
#[derive(Debug, Clone, Copy)]
pub struct LmOutput {
    pub hidden: Var,
    pub logits: Var,
}

impl PolicyModel {
    pub fn new<R: Rng + ?Sized>(config: LmConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let resid_std = 0.02 / (2.0 * config.n_layers as f64).sqrt();
        let params = param_layout(&config)
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with("gamma") {
                    Tensor::ones(&shape)
                } else if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else if name.ends_with("wo") || name.ends_with("w2") {
                    Tensor::randn(&shape, resid_std, rng)
                } else {
                    Tensor::randn(&shape, 0.02, rng)
                }
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Rebuild from stored tensors; shapes must match the config's layout.
    pub fn from_params(config: LmConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::shape(
                "model",
                format!("expected {} tensors, got {}", layout.len(), params.len()),
            ));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "model",
                    format!("{name}: expected {shape:?}, got {:?}", p.shape()),
                ));
            }
            if !p.all_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        param_layout(&self.config)
            .into_iter()
            .map(|(n, _)| n)
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Record the parameters as tape leaves, tracked for gradients or not.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        BoundParams(
            self.params
                .iter()
                .map(|p| {
                    if trainable {
                        tape.param(p.clone())
                    } else {
                        tape.constant(p.clone())
                    }
                })
                .collect(),
        )
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::UnknownTokenId {
                id,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Forward pass over `tokens` using parameters already bound to `tape`.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        tokens: &[usize],
    ) -> Result<LmOutput> {
        self.check_tokens(tokens)?;
        let p = &p.0;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = tape.embedding(p[0], tokens)?;
        let pos = tape.embedding(p[1], &positions)?;
        let mut x = tape.add(tok, pos)?;
        for l in 0..self.config.n_layers {
            let b = 2 + l * PER_LAYER;
            let h = tape.layer_norm(x, p[b + LN1_G], p[b + LN1_B])?;
            let q = linear(tape, h, p[b + WQ], p[b + BQ])?;
            let k = linear(tape, h, p[b + WK], p[b + BK])?;
            let v = linear(tape, h, p[b + WV], p[b + BV])?;
            let a = tape.causal_attention(q, k, v, self.config.n_heads)?;
            let o = linear(tape, a, p[b + WO], p[b + BO])?;
            x = tape.add(x, o)?;
            let h2 = tape.layer_norm(x, p[b + LN2_G], p[b + LN2_B])?;
            let f = linear(tape, h2, p[b + W1], p[b + B1])?;
            let f = tape.gelu(f)?;
            let f = linear(tape, f, p[b + W2], p[b + B2])?;
            x = tape.add(x, f)?;
        }
        let f = 2 + self.config.n_layers * PER_LAYER;
        let hidden = tape.layer_norm(x, p[f], p[f + 1])?;
        let logits = tape.matmul(hidden, p[f + 2])?;
        Ok(LmOutput { hidden, logits })
    }

    /// Per-position next-token logits, shape `[len, vocab]`.
    pub fn forward_logits(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let out = self.forward_on(&mut tape, &p, tokens)?;
        Ok(tape.value(out.logits)?.clone())
    }

    /// Final-layer hidden states, shape `[len, d_model]`.
    pub fn forward_hidden(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let out = self.forward_on(&mut tape, &p, tokens)?;
        Ok(tape.value(out.hidden)?.clone())
    }

    /// Log-probabilities of each response token given everything before it,
    /// recorded on `tape`. Also returns the hidden states at the positions
    /// that predict each response token.
    pub fn response_log_probs_on(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        prompt: &[usize],
        response: &[usize],
    ) -> Result<(Var, Var)> {
        let tokens = join_for_scoring(prompt, response, self.config.max_seq_len)?;
        if let Some(&id) = response.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::UnknownTokenId {
                id,
                size: self.config.vocab_size,
            });
        }
        let out = self.forward_on(tape, p, &tokens)?;
        let rows: Vec<usize> = (0..response.len()).map(|i| prompt.len() - 1 + i).collect();
        let logits = tape.select_rows(out.logits, &rows)?;
        let lp = tape.log_softmax(logits)?;
        let picked = tape.pick_per_row(lp, response)?;
        let hidden = tape.select_rows(out.hidden, &rows)?;
        Ok((picked, hidden))
    }

    /// `log p(y_i | x, y_<i)` for every response token.
    pub fn token_log_probs(&self, prompt: &[usize], response: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let (lp, _) = self.response_log_probs_on(&mut tape, &p, prompt, response)?;
        Ok(tape.value(lp)?.data().to_vec())
    }

    /// `log p(y | x)`: the chain-rule sum over response tokens.
    pub fn sequence_log_prob(&self, prompt: &[usize], response: &[usize]) -> Result<f64> {
        Ok(self.token_log_probs(prompt, response)?.iter().sum())
    }

    /// Sample a response. Stops after EOS (which is included), after
    /// `max_new` tokens, or when the context is full.
    pub fn generate(
        &self,
        prompt: &[usize],
        opts: &SampleOptions,
        seed: u64,
    ) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        opts.validate(self.config.vocab_size)?;
        self.check_tokens(prompt)?;
        let mut rng = SeedStream::new(seed).named("generate").rng();
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let base = tape.len();
        let mut tokens = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < opts.max_new && tokens.len() < self.config.max_seq_len {
            let o = self.forward_on(&mut tape, &p, &tokens)?;
            let logits = tape.value(o.logits)?;
            let last = logits.row(tokens.len() - 1).to_vec();
            tape.truncate(base);
            let next = sample_next(&last, opts, &mut rng)?;
            tokens.push(next);
            out.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(out)
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Tokens fed to the model when scoring `response` after `prompt`. The last
/// response token is never an input, only a target.
fn join_for_scoring(prompt: &[usize], response: &[usize], max_len: usize) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    if response.is_empty() {
        return Err(Error::EmptyResponse);
    }
    let full = prompt.len() + response.len();
    if full > max_len {
        return Err(Error::SequenceTooLong {
            len: full,
            max: max_len,
        });
    }
    let mut tokens = Vec::with_capacity(full - 1);
    tokens.extend_from_slice(prompt);
    tokens.extend_from_slice(&response[..response.len() - 1]);
    Ok(tokens)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub max_new: usize,
    /// 0 means greedy decoding.
    pub temperature: f64,
    pub top_k: usize,
}

impl SampleOptions {
    pub fn greedy(max_new: usize) -> Self {
        Self {
            max_new,
            temperature: 0.0,
            top_k: 1,
        }
    }

    fn validate(&self, vocab_size: usize) -> Result<()> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.top_k == 0 || self.top_k > vocab_size {
            return Err(Error::InvalidArgument(format!(
                "top_k must be in 1..={vocab_size}, got {}",
                self.top_k
            )));
        }
        Ok(())
    }
}

/// Top-k truncation, then temperature-scaled softmax over the survivors.
/// Ties in the ranking go to the smaller token id.
pub fn sample_next<R: Rng + ?Sized>(
    logits: &[f64],
    opts: &SampleOptions,
    rng: &mut R,
) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    if opts.temperature == 0.0 || opts.top_k == 1 {
        return Ok(order[0]);
    }
    order.truncate(opts.top_k.min(logits.len()));
    let scaled: Vec<f64> = order
        .iter()
        .map(|&i| logits[i] / opts.temperature)
        .collect();
    let probs = tensor::softmax(&scaled)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (&id, p) in order.iter().zip(&probs) {
        acc += p;
        if u < acc {
            return Ok(id);
        }
    }
    Ok(*order.last().expect("non-empty"))
}

/// Frozen copy of the policy's parameters at the start of fine-tuning.
#[derive(Debug, Clone)]
pub struct ReferenceSnapshot {
    model: Arc<PolicyModel>,
}

impl ReferenceSnapshot {
    pub fn of(policy: &PolicyModel) -> Self {
        Self {
            model: Arc::new(policy.clone()),
        }
    }

    pub fn model(&self) -> &PolicyModel {
        &self.model
    }
}

/// One next-token training example: predict `response` after `prompt`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
}

impl TrainPair {
    /// Clip so `prompt + response` fits `max_len`: the response keeps at
    /// most half the context, the prompt keeps its tail.
    pub fn fitted(mut prompt: Vec<usize>, mut response: Vec<usize>, max_len: usize) -> Self {
        let max_resp = (max_len / 2).max(1);
        response.truncate(max_resp);
        let room = max_len - response.len();
        if prompt.len() > room {
            prompt.drain(..prompt.len() - room);
        }
        Self { prompt, response }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1200,
            batch_size: 16,
            lr: 3e-3,
            max_grad_norm: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LmTrainReport {
    /// Mean per-token cross-entropy of each step's batch, in nats.
    pub losses: Vec<f64>,
}

/// Summed response-token cross-entropy of one pair, divided by `denom`.
fn pair_loss(
    model: &PolicyModel,
    tape: &mut Tape,
    p: &BoundParams,
    pair: &TrainPair,
    denom: f64,
) -> Result<Var> {
    let (lp, _) = model.response_log_probs_on(tape, p, &pair.prompt, &pair.response)?;
    let s = tape.sum(lp)?;
    tape.scale(s, -1.0 / denom)
}

/// Gradient of the token-averaged cross-entropy over `batch`.
pub fn lm_batch_gradient(model: &PolicyModel, batch: &[&TrainPair]) -> Result<(f64, Vec<Tensor>)> {
    let total: usize = batch.iter().map(|p| p.response.len()).sum();
    let denom = total as f64;
    let mut grads: Vec<Tensor> = model.params.iter().map(Tensor::same_shape_zeros).collect();
    let mut loss = 0.0;
    let mut tape = Tape::new();
    for pair in batch {
        let p = model.bind(&mut tape, true);
        let l = pair_loss(model, &mut tape, &p, pair, denom)?;
        loss += tape.value(l)?.item();
        let g = tape.backward(l)?;
        for (acc, &v) in grads.iter_mut().zip(p.vars()) {
            if let Some(gv) = g.get(v) {
                acc.add_assign(gv);
            }
        }
    }
    Ok((loss, grads))
}

/// Next-token training on `(context, response)` pairs with Adam.
pub fn train_lm(
    model: &mut PolicyModel,
    pairs: &[TrainPair],
    cfg: &LmTrainConfig,
) -> Result<LmTrainReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = SeedStream::new(cfg.seed).named("train-lm").rng();
    let mut state = AdamState::new(&model.params);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(pairs.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&pairs[order[cursor]]);
            cursor += 1;
        }
        let (loss, mut grads) = lm_batch_gradient(model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("language-model training loss".into()));
        }
        clip_grad_norm(&mut grads, cfg.max_grad_norm);
        adam_step(&mut model.params, &grads, &mut state, &adam)?;
        losses.push(loss);
    }
    Ok(LmTrainReport { losses })
}

/// Mean per-token negative log-likelihood of the responses.
pub fn mean_nll(model: &PolicyModel, pairs: &[TrainPair]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for pair in pairs {
        total -= model.sequence_log_prob(&pair.prompt, &pair.response)?;
        count += pair.response.len();
    }
    if count == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(total / count as f64)
}

/// Perplexity of a unigram model fitted to the response tokens themselves.
pub fn unigram_perplexity(pairs: &[TrainPair], vocab_size: usize) -> Result<f64> {
    let mut counts = vec![0usize; vocab_size];
    let mut n = 0usize;
    for pair in pairs {
        for &t in &pair.response {
            if t >= vocab_size {
                return Err(Error::UnknownTokenId {
                    id: t,
                    size: vocab_size,
                });
            }
            counts[t] += 1;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    let nf = n as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / nf;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}
