//! Staged command-line pipeline: prepare, train-lm, train-reward, ppo,
//! eval and chat. Every stage reads and writes artifacts in one output
//! directory and leaves a `<stage>.config.toml` snapshot next to them.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::Serialize;

use crate::affect::{CircumplexTable, EmotionLabel};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{RewardSource, RunConfig};
use crate::error::Error;
use crate::lm::{
    mean_nll, train_lm, unigram_perplexity, PolicyModel, ReferenceSnapshot, SampleOptions,
    TrainPair,
};
use crate::ppo::{self, Estimate, ModelReward, OracleReward, PpoEnv, RewardFn, ValueHead};
use crate::reward_model::{
    build_reward_dataset, train_reward_model, RewardHead, BIAS_BLOCK, WEIGHT_BLOCK,
};
use crate::seed::SeedStream;
use crate::sim_env::{prompt_pool, EmotionLexicon, SimUser};
use crate::text::{
    context_pairs, encode_prompt, encode_response, load_meld_csv, read_utterances_jsonl,
    synth_corpus_with, tokenize, write_utterances_jsonl, Utterance, Vocabulary,
};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const SUMMARY_FILE: &str = "data_summary.json";
pub const LM_FILE: &str = "lm.ckpt";
pub const LM_METRICS_FILE: &str = "lm_metrics.jsonl";
pub const REWARD_FILE: &str = "reward.ckpt";
pub const REWARD_METRICS_FILE: &str = "reward_metrics.json";
pub const POLICY_FILE: &str = "policy.ckpt";
pub const VALUE_FILE: &str = "value_head.json";
pub const PPO_METRICS_FILE: &str = "ppo_metrics.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const EVAL_SUMMARY_FILE: &str = "eval_summary.json";
pub const EVAL_REPORT_FILE: &str = "eval_summary.txt";
pub const CHAT_LOG_FILE: &str = "chat.log";

#[derive(Debug, Parser)]
#[command(
    name = "circumplex-rl",
    version,
    about = "Fine-tune a tiny dialogue model towards positive affect"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to $CIRCUMPLEX_RL_OUT, then the config value.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override one configuration key.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the utterance corpus and vocabulary.
    Prepare(PrepareArgs),
    /// Train the language model on (context, reply) pairs.
    TrainLm,
    /// Fit the emotion/affect reward head on the frozen language model.
    TrainReward,
    /// PPO fine-tuning against the reward.
    Ppo(PpoArgs),
    /// Measure expected reward, KL to the reference and positive-valence rate.
    Eval(EvalArgs),
    /// Talk to a checkpoint on stdin.
    Chat(ChatArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// MELD-style CSV with Utterance, Speaker, Emotion, Dialogue_ID and Utterance_ID columns.
    #[arg(long, value_name = "CSV", conflicts_with = "synthetic")]
    pub meld: Option<PathBuf>,
    /// Generate a synthetic corpus instead.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long)]
    pub dialogues: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PpoArgs {
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub beta0: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Policy to evaluate; defaults to the PPO output.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Reference policy; defaults to the trained language model.
    #[arg(long, value_name = "FILE")]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
}

/// A failure with its process exit code: 1 for runtime failures, 2 for
/// usage and configuration errors.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::MissingColumn(_)
            | Error::BadLabel { .. }
            | Error::BadRow { .. } => 2,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Resolve configuration and run one subcommand. `input` feeds `chat`.
pub fn run(cli: Cli, input: &mut dyn BufRead, out: &mut dyn Write) -> CliResult {
    let mut overrides = cli.global.set.clone();
    if let Some(s) = cli.global.seed {
        overrides.push(format!("seed={s}"));
    }
    let stage = match &cli.command {
        Command::Prepare(a) => {
            if let Some(p) = &a.meld {
                overrides.push(format!("meld={}", toml_str(&p.display().to_string())));
            }
            if let Some(n) = a.dialogues {
                overrides.push(format!("dialogues={n}"));
            }
            "prepare"
        }
        Command::TrainLm => "train-lm",
        Command::TrainReward => "train-reward",
        Command::Ppo(a) => {
            if let Some(n) = a.episodes {
                overrides.push(format!("episodes={n}"));
            }
            if let Some(b) = a.beta0 {
                overrides.push(format!("beta0={b}"));
            }
            "ppo"
        }
        Command::Eval(a) => {
            if a.samples == Some(0) {
                return Err(CliError::usage("--samples must be >= 1"));
            }
            "eval"
        }
        Command::Chat(_) => "chat",
    };
    let mut cfg = RunConfig::resolve(
        cli.global.config.as_deref(),
        cli.global.out.as_deref(),
        &overrides,
    )?;
    if let Command::Prepare(a) = &cli.command {
        if a.synthetic {
            cfg.meld = None;
        }
    }
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(
        cfg.out_dir.join(format!("{stage}.config.toml")),
        cfg.to_toml(),
    )?;
    match cli.command {
        Command::Prepare(_) => cmd_prepare(&cfg, out),
        Command::TrainLm => cmd_train_lm(&cfg, out),
        Command::TrainReward => cmd_train_reward(&cfg, out),
        Command::Ppo(_) => cmd_ppo(&cfg, out),
        Command::Eval(a) => cmd_eval(&cfg, &a, out),
        Command::Chat(a) => cmd_chat(&cfg, &a, input, out),
    }
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn need(path: PathBuf) -> CliResult<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingFile(path).into())
    }
}

fn lexicon(cfg: &RunConfig) -> CliResult<EmotionLexicon> {
    Ok(match &cfg.lexicon {
        Some(p) => EmotionLexicon::load(&need(p.clone())?)?,
        None => EmotionLexicon::default(),
    })
}

fn table(cfg: &RunConfig) -> CliResult<CircumplexTable> {
    Ok(match &cfg.circumplex {
        Some(p) => CircumplexTable::load(&need(p.clone())?)?,
        None => CircumplexTable::default(),
    })
}

fn sim_user(cfg: &RunConfig) -> CliResult<SimUser> {
    Ok(SimUser {
        lexicon: lexicon(cfg)?,
        table: table(cfg)?,
        lambda: cfg.lambda,
        noise: cfg.noise,
    })
}

fn load_corpus(cfg: &RunConfig) -> CliResult<(Vec<Utterance>, Vocabulary)> {
    let corpus = read_utterances_jsonl(BufReader::new(File::open(need(
        cfg.out_dir.join(CORPUS_FILE),
    )?)?))?;
    let vocab = Vocabulary::load(&need(cfg.out_dir.join(VOCAB_FILE))?)?;
    Ok((corpus, vocab))
}

fn load_model(path: &Path) -> CliResult<PolicyModel> {
    Ok(load_checkpoint(&need(path.to_path_buf())?)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn prompts(cfg: &RunConfig, vocab: &Vocabulary) -> CliResult<Vec<Vec<usize>>> {
    let seed = SeedStream::new(cfg.seed).named("prompts").seed();
    let out: Vec<Vec<usize>> = prompt_pool(seed, cfg.prompts)?
        .iter()
        .map(|p| encode_prompt(vocab, Some(p)))
        .collect();
    if let Some(p) = out.iter().find(|p| p.len() > cfg.max_seq_len / 2) {
        return Err(Error::Config(format!(
            "prompt of {} tokens exceeds half of max_seq_len {}",
            p.len(),
            cfg.max_seq_len
        ))
        .into());
    }
    Ok(out)
}

#[derive(Serialize)]
struct DataSummary {
    source: String,
    utterances: usize,
    dialogues: usize,
    tokens: usize,
    vocab_size: usize,
    labels: BTreeMap<EmotionLabel, usize>,
}

fn cmd_prepare(cfg: &RunConfig, out: &mut dyn Write) -> CliResult {
    let (corpus, source) = match &cfg.meld {
        Some(p) => (load_meld_csv(&need(p.clone())?)?, p.display().to_string()),
        None => {
            let seed = SeedStream::new(cfg.seed).named("corpus").seed();
            (
                synth_corpus_with(seed, cfg.dialogues, &lexicon(cfg)?),
                "synthetic".to_string(),
            )
        }
    };
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus.into());
    }
    let vocab = Vocabulary::build(corpus.iter().map(|u| u.text.as_str()), cfg.vocab_max)?;
    let mut w = BufWriter::new(File::create(cfg.out_dir.join(CORPUS_FILE))?);
    write_utterances_jsonl(&corpus, &mut w)?;
    w.flush()?;
    vocab.save(&cfg.out_dir.join(VOCAB_FILE))?;

    let mut labels: BTreeMap<EmotionLabel, usize> =
        EmotionLabel::ALL.iter().map(|&l| (l, 0)).collect();
    for u in &corpus {
        *labels.entry(u.emotion).or_default() += 1;
    }
    let mut dialogue_ids: Vec<u64> = corpus.iter().map(|u| u.dialogue_id).collect();
    dialogue_ids.dedup();
    let summary = DataSummary {
        source,
        utterances: corpus.len(),
        dialogues: dialogue_ids.len(),
        tokens: corpus.iter().map(|u| tokenize(&u.text).len()).sum(),
        vocab_size: vocab.len(),
        labels,
    };
    write_json(&cfg.out_dir.join(SUMMARY_FILE), &summary)?;
    writeln!(
        out,
        "prepared {} utterances in {} dialogues, {} tokens, vocabulary {}",
        summary.utterances, summary.dialogues, summary.tokens, summary.vocab_size
    )?;
    Ok(())
}

fn train_pairs(corpus: &[Utterance], vocab: &Vocabulary, max_len: usize) -> Vec<TrainPair> {
    context_pairs(corpus)
        .into_iter()
        .map(|(prev, cur)| {
            TrainPair::fitted(
                encode_prompt(vocab, prev.map(|i| corpus[i].text.as_str())),
                encode_response(vocab, &corpus[cur].text),
                max_len,
            )
        })
        .collect()
}

fn cmd_train_lm(cfg: &RunConfig, out: &mut dyn Write) -> CliResult {
    let (corpus, vocab) = load_corpus(cfg)?;
    let lm_cfg = cfg.lm_config(vocab.len());
    let pairs = train_pairs(&corpus, &vocab, lm_cfg.max_seq_len);
    let mut rng = SeedStream::new(cfg.seed).named("lm-init").rng();
    let mut model = PolicyModel::new(lm_cfg, &mut rng)?;
    let report = train_lm(&mut model, &pairs, &cfg.lm_train())?;
    let mut w = BufWriter::new(File::create(cfg.out_dir.join(LM_METRICS_FILE))?);
    for (step, loss) in report.losses.iter().enumerate() {
        serde_json::to_writer(&mut w, &serde_json::json!({ "step": step, "loss": loss }))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    save_checkpoint(&model, &cfg.out_dir.join(LM_FILE))?;
    let nll = mean_nll(&model, &pairs)?;
    writeln!(
        out,
        "language model: {} parameters, perplexity {:.3} (unigram {:.3})",
        model.num_parameters(),
        nll.exp(),
        unigram_perplexity(&pairs, vocab.len())?
    )?;
    Ok(())
}

fn cmd_train_reward(cfg: &RunConfig, out: &mut dyn Write) -> CliResult {
    let (corpus, vocab) = load_corpus(cfg)?;
    let model = load_model(&cfg.out_dir.join(LM_FILE))?;
    let dataset = build_reward_dataset(&corpus, &vocab, model.config().max_seq_len);
    let mut head = RewardHead::zeros(model.config().d_model);
    let report = train_reward_model(
        &model,
        &mut head,
        &dataset,
        &table(cfg)?,
        &cfg.reward_train(),
    )?;
    write_json(&cfg.out_dir.join(REWARD_METRICS_FILE), &report)?;
    let mut ck = Checkpoint::new(model);
    ck.set_extra(WEIGHT_BLOCK, head.weight().clone());
    ck.set_extra(BIAS_BLOCK, head.bias().clone());
    ck.save(&cfg.out_dir.join(REWARD_FILE))?;
    writeln!(
        out,
        "reward model: held-out accuracy {:.3}, affect MAE {:.3} ({} train, {} held out)",
        report.accuracy, report.affect_mae, report.train_examples, report.heldout_examples
    )?;
    Ok(())
}

fn reward_fn(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    corpus: Option<&[Utterance]>,
) -> CliResult<Box<dyn RewardFn>> {
    let user = sim_user(cfg)?;
    match cfg.reward_source {
        RewardSource::Oracle => Ok(Box::new(OracleReward {
            user,
            vocab: vocab.clone(),
        })),
        RewardSource::Model => {
            let ck = Checkpoint::load(&need(cfg.out_dir.join(REWARD_FILE))?)?;
            let missing =
                |n: &str| Error::Checkpoint(format!("reward checkpoint lacks block `{n}`"));
            let head = RewardHead::from_tensors(
                ck.extra(WEIGHT_BLOCK)
                    .ok_or_else(|| missing(WEIGHT_BLOCK))?
                    .clone(),
                ck.extra(BIAS_BLOCK)
                    .ok_or_else(|| missing(BIAS_BLOCK))?
                    .clone(),
            )?;
            let mut r = ModelReward::new(ck.model, head);
            r.pooling = cfg.pooling;
            r.intrinsic = Some((user.clone(), vocab.clone()));
            if let Some(corpus) = corpus.filter(|_| cfg.refresh_reward_model) {
                r.refresh_data = Some((
                    build_reward_dataset(corpus, vocab, cfg.max_seq_len),
                    user.table,
                    cfg.reward_train(),
                ));
            }
            Ok(Box::new(r))
        }
    }
}

#[derive(Serialize)]
struct ValueHeadFile<'a> {
    weight: &'a [f64],
    bias: f64,
}

fn cmd_ppo(cfg: &RunConfig, out: &mut dyn Write) -> CliResult {
    let (corpus, vocab) = load_corpus(cfg)?;
    let mut policy = load_model(&cfg.out_dir.join(LM_FILE))?;
    let reference = ReferenceSnapshot::of(&policy);
    let mut reward = reward_fn(cfg, &vocab, Some(&corpus))?;
    let env = PpoEnv {
        prompts: prompts(cfg, &vocab)?,
        vocab: Some(vocab.clone()),
        judge: Some(sim_user(cfg)?),
    };
    let ppo_cfg = cfg.ppo();
    let mut metrics = BufWriter::new(File::create(cfg.out_dir.join(PPO_METRICS_FILE))?);
    let dir = cfg.out_dir.clone();
    let every = cfg.checkpoint_every;
    let result = ppo::train(
        &mut policy,
        &reference,
        reward.as_mut(),
        &env,
        &ppo_cfg,
        |rec, pol| {
            serde_json::to_writer(&mut metrics, rec)?;
            metrics.write_all(b"\n")?;
            metrics.flush()?;
            if every > 0 && (rec.episode + 1) % every == 0 {
                save_checkpoint(pol, &dir.join(format!("policy_ep{}.ckpt", rec.episode + 1)))?;
            }
            writeln!(
                out,
                "episode {:3}  reward {:+.3}  kl {:7.3}  beta {:.4}  clip {:.3}",
                rec.episode, rec.mean_reward, rec.mean_kl, rec.beta, rec.clip_fraction
            )?;
            Ok(())
        },
    );
    let history = match result {
        Ok(h) => h,
        Err(e) => {
            save_checkpoint(&policy, &cfg.out_dir.join("policy_last_good.ckpt"))?;
            return Err(e.into());
        }
    };
    save_checkpoint(&policy, &cfg.out_dir.join(POLICY_FILE))?;
    let ValueHead { weight, bias } = &history.value_head;
    write_json(
        &cfg.out_dir.join(VALUE_FILE),
        &ValueHeadFile {
            weight: weight.data(),
            bias: bias.data()[0],
        },
    )?;
    if let Some(last) = history.records.last() {
        writeln!(
            out,
            "final reward {:+.3}, kl {:.3}",
            last.mean_reward, last.mean_kl
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalRecord {
    index: usize,
    prompt: String,
    response: String,
    reward: f64,
    oracle_label: EmotionLabel,
    oracle_reward: f64,
    log_ratio: f64,
}

#[derive(Serialize)]
struct EvalSummary {
    samples: usize,
    expected_reward: Estimate,
    oracle_reward: Estimate,
    kl: Estimate,
    positive_fraction: f64,
}

fn estimate(xs: &[f64]) -> Estimate {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std_err = if n > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt()
    } else {
        0.0
    };
    Estimate { mean, std_err, n }
}

fn cmd_eval(cfg: &RunConfig, args: &EvalArgs, out: &mut dyn Write) -> CliResult {
    let (_, vocab) = load_corpus(cfg)?;
    let policy = load_model(
        &args
            .checkpoint
            .clone()
            .unwrap_or_else(|| cfg.out_dir.join(POLICY_FILE)),
    )?;
    let reference = load_model(
        &args
            .reference
            .clone()
            .unwrap_or_else(|| cfg.out_dir.join(LM_FILE)),
    )?;
    if policy.config() != reference.config() {
        return Err(Error::Checkpoint("policy and reference configurations differ".into()).into());
    }
    let reward = reward_fn(cfg, &vocab, None)?;
    let judge = sim_user(cfg)?;
    let prompts = prompts(cfg, &vocab)?;
    let n = args.samples.unwrap_or(cfg.eval_samples);
    if n == 0 {
        return Err(CliError::usage("eval_samples must be >= 1"));
    }
    let opts = SampleOptions {
        max_new: cfg.max_response_len,
        temperature: cfg.temperature,
        top_k: vocab.len(),
    };
    let stream = SeedStream::new(cfg.seed).named("eval");
    let mut w = BufWriter::new(File::create(cfg.out_dir.join(EVAL_FILE))?);
    let (mut rewards, mut oracle, mut ratios, mut positive) =
        (Vec::new(), Vec::new(), Vec::new(), 0usize);
    for i in 0..n {
        let mut rng = stream.child(i as u64).rng();
        let prompt = &prompts[rng.gen_range(0..prompts.len())];
        let response = policy.generate(prompt, &opts, rng.gen())?;
        let r = reward.reward(prompt, &response, rng.gen())?;
        let text = vocab.decode(&response)?;
        let fb = judge.respond(&text, i as u64)?;
        let ratio = policy.sequence_log_prob(prompt, &response)?
            - reference.sequence_log_prob(prompt, &response)?;
        if fb.label.valence_sign() > 0 {
            positive += 1;
        }
        let rec = EvalRecord {
            index: i,
            prompt: vocab.decode(prompt)?,
            response: text,
            reward: r,
            oracle_label: fb.label,
            oracle_reward: fb.reward,
            log_ratio: ratio,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
        rewards.push(r);
        oracle.push(fb.reward);
        ratios.push(ratio);
    }
    w.flush()?;
    let summary = EvalSummary {
        samples: n,
        expected_reward: estimate(&rewards),
        oracle_reward: estimate(&oracle),
        kl: estimate(&ratios),
        positive_fraction: positive as f64 / n as f64,
    };
    write_json(&cfg.out_dir.join(EVAL_SUMMARY_FILE), &summary)?;
    let text = format!(
        "samples            {}\nexpected reward    {:+.4} ± {:.4}\noracle reward      {:+.4} ± {:.4}\nKL to reference    {:.4} ± {:.4} nats\npositive valence   {:.3}\n",
        n,
        summary.expected_reward.mean,
        summary.expected_reward.std_err,
        summary.oracle_reward.mean,
        summary.oracle_reward.std_err,
        summary.kl.mean,
        summary.kl.std_err,
        summary.positive_fraction
    );
    fs::write(cfg.out_dir.join(EVAL_REPORT_FILE), &text)?;
    out.write_all(text.as_bytes())?;
    Ok(())
}

fn cmd_chat(
    cfg: &RunConfig,
    args: &ChatArgs,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
) -> CliResult {
    let (_, vocab) = load_corpus(cfg)?;
    let policy = load_model(
        &args
            .checkpoint
            .clone()
            .unwrap_or_else(|| cfg.out_dir.join(POLICY_FILE)),
    )?;
    let user = sim_user(cfg)?;
    let opts = SampleOptions {
        max_new: cfg.max_response_len,
        temperature: cfg.temperature,
        top_k: vocab.len(),
    };
    let stream = SeedStream::new(cfg.seed).named("chat");
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(cfg.out_dir.join(CHAT_LOG_FILE))?;
    let mut turn = 0u64;
    let mut line = Vec::new();
    loop {
        write!(out, "> ")?;
        out.flush()?;
        line.clear();
        if input.read_until(b'\n', &mut line)? == 0 {
            break;
        }
        let Ok(text) = std::str::from_utf8(&line) else {
            eprintln!("warning: skipping input line that is not valid UTF-8");
            continue;
        };
        let text = text.trim();
        if text.is_empty() {
            continue;
        }
        let mut prompt = encode_prompt(&vocab, Some(text));
        let room = policy.config().max_seq_len.saturating_sub(1);
        if prompt.len() > room {
            prompt.drain(..prompt.len() - room);
        }
        let seed = stream.child(turn).seed();
        let response = policy.generate(&prompt, &opts, seed)?;
        let reply = vocab.decode(&response)?;
        let fb = user.respond(&reply, seed)?;
        writeln!(out, "{reply}")?;
        writeln!(out, "  [{} reward {:+.5}]", fb.label, fb.reward)?;
        writeln!(
            log,
            "user: {text}\nbot: {reply}\nlabel: {} reward: {:+.5}",
            fb.label, fb.reward
        )?;
        turn += 1;
    }
    writeln!(out)?;
    Ok(())
}
