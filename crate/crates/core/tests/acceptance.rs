//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion reports exactly one PASS/FAIL line.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Instant;

use circumplex_rl::affect::{circumplex_reward, label_reward, CircumplexTable, EmotionLabel};
use circumplex_rl::gradcheck::{grad_check, grad_check_sampled};
use circumplex_rl::lm::{
    param_layout, train_lm, BoundParams, LmConfig, LmTrainConfig, PolicyModel, ReferenceSnapshot,
    SampleOptions, TrainPair,
};
use circumplex_rl::ppo::{
    measure_kl, policy_expected_reward, shaped_reward, surrogate_loss_on, train, BetaMode,
    EpisodeRecord, ModelReward, PpoConfig, PpoEnv, Rollout,
};
use circumplex_rl::reward_model::{
    build_reward_dataset, head_loss_on, separable_clusters, train_head_on_embeddings,
    train_reward_model, HeadVars, RewardHead, RewardTrainConfig,
};
use circumplex_rl::sim_env::{prompt_pool, SimUser};
use circumplex_rl::tensor::Tensor;
use circumplex_rl::text::{
    context_pairs, encode_prompt, encode_response, synth_corpus, Vocabulary, BOS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn check(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn noisy(model: &mut PolicyModel, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params_mut() {
        *p = Tensor::randn(p.shape(), std, &mut rng);
    }
}

fn log_softmax_at(row: &[f64], i: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row[i] - lse
}

fn chain_rule() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let vocab = rng.gen_range(4..12);
        let d = [8, 16][rng.gen_range(0..2)];
        let cfg = LmConfig {
            vocab_size: vocab,
            d_model: d,
            n_layers: rng.gen_range(1..3),
            n_heads: 2,
            max_seq_len: 16,
            dropout: 0.0,
        };
        let mut model = PolicyModel::new(cfg, &mut rng).map_err(|e| e.to_string())?;
        noisy(&mut model, 0.5, case);
        let mut prompt = vec![BOS];
        prompt.extend((0..rng.gen_range(0..5)).map(|_| rng.gen_range(0..vocab)));
        let response: Vec<usize> = (0..rng.gen_range(1..7))
            .map(|_| rng.gen_range(0..vocab))
            .collect();
        let total = model
            .sequence_log_prob(&prompt, &response)
            .map_err(|e| e.to_string())?;
        let mut stepwise = 0.0;
        let mut ctx = prompt.clone();
        for &y in &response {
            let logits = model.forward_logits(&ctx).map_err(|e| e.to_string())?;
            let (t, _) = logits.rows_cols();
            stepwise += log_softmax_at(logits.row(t - 1), y);
            ctx.push(y);
        }
        worst = worst.max((total - stepwise).abs());
    }
    let cfg = LmConfig {
        vocab_size: 4,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 8,
        dropout: 0.0,
    };
    let zeros: Vec<Tensor> = param_layout(&cfg)
        .iter()
        .map(|(_, s)| Tensor::zeros(s))
        .collect();
    let uniform = PolicyModel::from_params(cfg, zeros).map_err(|e| e.to_string())?;
    let lp = uniform
        .sequence_log_prob(&[BOS], &[0, 1, 3])
        .map_err(|e| e.to_string())?;
    check(
        worst <= 1e-10 && (lp - (-4.158883)).abs() <= 1e-6 && (lp + 3.0 * 4f64.ln()).abs() <= 1e-9,
        format!("max |seq - stepwise| {worst:.2e}, uniform vocab-4 |y|=3 log-prob {lp:.9}"),
    )
}

fn gradients() -> Check {
    let run = || -> circumplex_rl::Result<[f64; 4]> {
        let cfg = LmConfig {
            vocab_size: 10,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 12,
            dropout: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = PolicyModel::new(cfg, &mut rng)?;
        noisy(&mut model, 0.3, 2);
        let prompt = vec![BOS, 4, 5];
        let response = vec![6, 7, 8, 3];

        let lm = grad_check_sampled(
            |tape, vars| {
                let p = BoundParams::from_vars(vars.to_vec());
                let (lp, _) = model.response_log_probs_on(tape, &p, &prompt, &response)?;
                let s = tape.sum(lp)?;
                tape.scale(s, -0.25)
            },
            model.params(),
            1e-5,
            8,
            3,
        )?;

        let hidden = model.forward_hidden(&[BOS, 4, 5, 6, 7])?;
        let head = RewardHead::new(16, &mut rng);
        let labels = [0, 2, 4, 6, 3];
        let targets = Tensor::uniform(&[5, 2], -0.8, 0.8, &mut rng);
        let (we, wa) = split_cols(head.weight(), 7);
        let bias = head.bias().data();
        let hp = [
            we,
            Tensor::vector(bias[..7].to_vec()),
            wa,
            Tensor::vector(bias[7..].to_vec()),
            hidden.clone(),
        ];
        let reward = grad_check(
            |tape, v| {
                let h = HeadVars([v[0], v[1], v[2], v[3]]);
                head_loss_on(tape, &h, v[4], &labels, &targets, 1.0)
            },
            &hp,
            1e-5,
        )?;

        let w = Tensor::randn(&[16, 1], 0.3, &mut rng);
        let b = Tensor::vector(vec![0.1]);
        let returns = Tensor::new(vec![5, 1], vec![0.5, -0.2, 0.9, 0.0, 1.1])?;
        let value = grad_check(
            |tape, v| {
                let y = tape.matmul(v[2], v[0])?;
                let y = tape.add_bias(y, v[1])?;
                let t = tape.constant(returns.clone());
                let e = tape.sub(y, t)?;
                let sq = tape.square(e)?;
                let s = tape.sum(sq)?;
                tape.scale(s, 0.1)
            },
            &[w, b, hidden],
            1e-5,
        )?;

        let current = model.token_log_probs(&prompt, &response)?;
        let ratios = [1.05, 1.5, 0.7, 0.95];
        let advantages = [1.0, 0.8, -0.6, -1.2];
        let rollout = Rollout {
            prompt: prompt.clone(),
            response: response.clone(),
            logp_policy: current
                .iter()
                .zip(ratios)
                .map(|(lp, r)| lp - f64::ln(r))
                .collect(),
            ..Default::default()
        };
        let surrogate = grad_check_sampled(
            |tape, vars| {
                let p = BoundParams::from_vars(vars.to_vec());
                Ok(surrogate_loss_on(tape, &model, &p, &rollout, &advantages, 0.2, 4.0)?.0)
            },
            model.params(),
            1e-5,
            8,
            4,
        )?;
        Ok([lm, reward, value, surrogate])
    };
    let errs = run().map_err(|e| e.to_string())?;
    let max = errs.iter().cloned().fold(0.0, f64::max);
    check(
        max <= 1e-4,
        format!(
            "max rel err: lm {:.1e}, reward head {:.1e}, value head {:.1e}, surrogate {:.1e}",
            errs[0], errs[1], errs[2], errs[3]
        ),
    )
}

fn split_cols(w: &Tensor, k: usize) -> (Tensor, Tensor) {
    let (rows, cols) = w.rows_cols();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for r in 0..rows {
        a.extend_from_slice(&w.row(r)[..k]);
        b.extend_from_slice(&w.row(r)[k..]);
    }
    (
        Tensor::new(vec![rows, k], a).expect("shape"),
        Tensor::new(vec![rows, cols - k], b).expect("shape"),
    )
}

fn reward_properties() -> Check {
    let table = CircumplexTable::default();
    let mut fails = Vec::new();
    for label in EmotionLabel::ALL {
        let r = label_reward(label, &table);
        let sign = if r > 0.0 {
            1
        } else if r < 0.0 {
            -1
        } else {
            0
        };
        if r.abs() > 2f64.sqrt() || sign != label.valence_sign() {
            fails.push(format!("{label}: {r}"));
        }
    }
    let neutral = label_reward(EmotionLabel::Neutral, &table);
    let joy = label_reward(EmotionLabel::Joy, &table);
    let joy_point = table.point(EmotionLabel::Joy);
    check(
        fails.is_empty()
            && neutral == 0.0
            && (joy - 0.94340).abs() <= 1e-5
            && circumplex_reward(joy_point) == joy,
        format!("7 labels bounded and sign-consistent, neutral {neutral}, joy {joy:.5} {fails:?}"),
    )
}

fn shaping_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10_000 {
        let r = rng.gen_range(-2.0..2.0);
        let a = rng.gen_range(-60.0..0.0);
        let b = rng.gen_range(-60.0..0.0);
        let beta = rng.gen_range(0.0..10.0);
        let same = shaped_reward(r, a, a, beta).map_err(|e| e.to_string())?;
        let free = shaped_reward(r, a, b, 0.0).map_err(|e| e.to_string())?;
        if same.to_bits() != r.to_bits() || free.to_bits() != r.to_bits() {
            return Err(format!(
                "r {r}, logps {a} {b}, beta {beta}: {same} / {free}"
            ));
        }
    }
    Ok("10000 randomized cases exact".into())
}

fn reward_learnability() -> Check {
    let start = Instant::now();
    let (x, y) = separable_clusters(1000, 64, 0.5, 5);
    let mut head = RewardHead::zeros(64);
    let report = train_head_on_embeddings(
        &mut head,
        &x,
        &y,
        &CircumplexTable::default(),
        &RewardTrainConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    check(
        report.accuracy >= 0.90 && report.affect_mae <= 0.10 && secs <= 120.0,
        format!(
            "held-out accuracy {:.3}, affect MAE {:.4} on {} held out, {secs:.1}s",
            report.accuracy, report.affect_mae, report.heldout_examples
        ),
    )
}

fn oracle_consistency() -> Check {
    let user = SimUser::default();
    let mut words: Vec<String> = EmotionLabel::ALL
        .iter()
        .flat_map(|&l| user.lexicon.words_for(l).to_vec())
        .collect();
    words.extend(
        [
            "the", "a", "so", "today", "really", "we", "went", "?", "!", ".",
        ]
        .map(String::from),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..1000u64 {
        let n = rng.gen_range(0..10);
        let text: Vec<&str> = (0..n)
            .map(|_| words[rng.gen_range(0..words.len())].as_str())
            .collect();
        let text = text.join(" ");
        let fb = user.respond(&text, i).map_err(|e| e.to_string())?;
        let expected = label_reward(user.classify(&text), &user.table);
        if fb.reward.to_bits() != expected.to_bits() {
            return Err(format!(
                "`{text}`: respond {} vs label reward {expected}",
                fb.reward
            ));
        }
    }

    // A 3-token policy against a reference, both enumerable over length-3 responses.
    let cfg = LmConfig {
        vocab_size: 3,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 8,
        dropout: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut policy = PolicyModel::new(cfg, &mut rng).map_err(|e| e.to_string())?;
    let mut reference = PolicyModel::new(cfg, &mut rng).map_err(|e| e.to_string())?;
    noisy(&mut policy, 0.6, 10);
    noisy(&mut reference, 0.6, 11);
    let prompt = vec![BOS];
    let mut exact = 0.0;
    let mut mass = 0.0;
    for code in 0..27usize {
        let y = vec![code / 9, (code / 3) % 3, code % 3];
        let lp = policy
            .sequence_log_prob(&prompt, &y)
            .map_err(|e| e.to_string())?;
        let lq = reference
            .sequence_log_prob(&prompt, &y)
            .map_err(|e| e.to_string())?;
        mass += lp.exp();
        exact += lp.exp() * (lp - lq);
    }
    let opts = SampleOptions {
        max_new: 3,
        temperature: 1.0,
        top_k: 3,
    };
    let est = measure_kl(&policy, &reference, &[prompt], &opts, 100_000, 12)
        .map_err(|e| e.to_string())?;
    check(
        (mass - 1.0).abs() < 1e-9 && (est.mean - exact).abs() <= 3.0 * est.std_err,
        format!(
            "1000 texts bit-exact; KL estimate {:.5} ± {:.5} vs enumerated {exact:.5}",
            est.mean, est.std_err
        ),
    )
}

struct Desk {
    vocab: Vocabulary,
    model: PolicyModel,
    head: RewardHead,
    prompts: Vec<Vec<usize>>,
    setup_secs: f64,
}

fn desk() -> circumplex_rl::Result<Desk> {
    let start = Instant::now();
    let corpus = synth_corpus(7, 400);
    let vocab = Vocabulary::build(corpus.iter().map(|u| u.text.as_str()), 512)?;
    let cfg = LmConfig::desk(vocab.len());
    let pairs: Vec<TrainPair> = context_pairs(&corpus)
        .into_iter()
        .map(|(p, c)| {
            TrainPair::fitted(
                encode_prompt(&vocab, p.map(|i| corpus[i].text.as_str())),
                encode_response(&vocab, &corpus[c].text),
                cfg.max_seq_len,
            )
        })
        .collect();
    let mut model = PolicyModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(1))?;
    train_lm(&mut model, &pairs, &LmTrainConfig::default())?;
    let dataset = build_reward_dataset(&corpus, &vocab, model.config().max_seq_len);
    let mut head = RewardHead::zeros(model.config().d_model);
    train_reward_model(
        &model,
        &mut head,
        &dataset,
        &CircumplexTable::default(),
        &RewardTrainConfig::default(),
    )?;
    let prompts = prompt_pool(3, 64)?
        .iter()
        .map(|p| encode_prompt(&vocab, Some(p)))
        .collect();
    Ok(Desk {
        vocab,
        model,
        head,
        prompts,
        setup_secs: start.elapsed().as_secs_f64(),
    })
}

struct Run {
    records: Vec<EpisodeRecord>,
    final_kl: f64,
    final_kl_err: f64,
}

fn run_ppo(d: &Desk, cfg: PpoConfig) -> circumplex_rl::Result<Run> {
    let reference = ReferenceSnapshot::of(&d.model);
    let mut reward = ModelReward::new(d.model.clone(), d.head.clone());
    let env = PpoEnv {
        prompts: d.prompts.clone(),
        vocab: Some(d.vocab.clone()),
        judge: Some(SimUser::default()),
    };
    let mut policy = d.model.clone();
    let history = train(&mut policy, &reference, &mut reward, &env, &cfg, |_, _| {
        Ok(())
    })?;
    let kl = measure_kl(
        &policy,
        &d.model,
        &d.prompts,
        &sample_opts(d, &cfg),
        1000,
        99,
    )?;
    Ok(Run {
        records: history.records,
        final_kl: kl.mean,
        final_kl_err: kl.std_err,
    })
}

fn sample_opts(d: &Desk, cfg: &PpoConfig) -> SampleOptions {
    SampleOptions {
        max_new: cfg.max_response_len,
        temperature: cfg.temperature,
        top_k: d.vocab.len(),
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn uplift(d: &Desk) -> Check {
    let start = Instant::now();
    let cfg = PpoConfig::default();
    let reward = ModelReward::new(d.model.clone(), d.head.clone());
    let base = policy_expected_reward(
        &d.model,
        &d.prompts,
        &reward,
        &sample_opts(d, &cfg),
        640,
        11,
    )
    .map_err(|e| e.to_string())?;
    let run = run_ppo(d, cfg).map_err(|e| e.to_string())?;
    let tail = &run.records[run.records.len() - 10..];
    let last10 = mean(tail.iter().map(|r| r.mean_reward));
    let minutes = (d.setup_secs + start.elapsed().as_secs_f64()) / 60.0;
    check(
        last10 - base.mean >= 0.3 && minutes <= 15.0,
        format!(
            "reference {:+.3} ± {:.3}, last-10 mean {last10:+.3}, uplift {:+.3}, {minutes:.1} min",
            base.mean,
            base.std_err,
            last10 - base.mean
        ),
    )
}

fn kl_control(d: &Desk) -> Check {
    let fixed = |beta0: f64| PpoConfig {
        episodes: 20,
        beta0,
        ..Default::default()
    };
    let run = |cfg| run_ppo(d, cfg).map_err(|e| e.to_string());
    let weak = run(fixed(0.01))?;
    let unit = run(fixed(1.0))?;
    let strong = run(fixed(100.0))?;
    let free = run(fixed(0.0))?;
    let adaptive_cfg = PpoConfig {
        beta_mode: BetaMode::Adaptive,
        ..Default::default()
    };
    let target = adaptive_cfg.kl_target;
    let adaptive = run(adaptive_cfg)?;
    let tail = &adaptive.records[adaptive.records.len() - 20..];
    let in_band = tail
        .iter()
        .filter(|r| r.mean_kl >= target / 1.5 && r.mean_kl <= target * 1.5)
        .count();
    let mean_reward = |r: &Run| mean(r.records.iter().map(|e| e.mean_reward));
    check(
        unit.final_kl <= weak.final_kl
            && strong.final_kl < 0.05
            && mean_reward(&free) >= mean_reward(&strong)
            && in_band * 5 >= tail.len() * 3,
        format!(
            "KL(β=1) {:.3} vs KL(β=0.01) {:.3}; KL(β=100) {:.4} ± {:.4}; reward β=0 {:+.3} vs β=100 {:+.3}; adaptive in band {in_band}/20",
            unit.final_kl,
            weak.final_kl,
            strong.final_kl,
            strong.final_kl_err,
            mean_reward(&free),
            mean_reward(&strong)
        ),
    )
}

fn cli(dir: &Path, args: &[&str], stdin: Option<&str>) -> Result<(), String> {
    let overrides = [
        "dialogues=30",
        "lm_steps=40",
        "rm_steps=100",
        "episodes=2",
        "rollouts=8",
        "minibatch=4",
        "prompts=16",
        "eval_samples=16",
        "checkpoint_every=1",
    ];
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_circumplex-rl"));
    cmd.args(args).arg("--out").arg(dir).args(["--seed", "5"]);
    for o in overrides {
        cmd.args(["--set", o]);
    }
    cmd.env_remove("CIRCUMPLEX_RL_OUT")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    let mut child = cmd.spawn().map_err(|e| e.to_string())?;
    {
        use std::io::Write;
        let mut input = child.stdin.take().expect("stdin");
        input
            .write_all(stdin.unwrap_or("").as_bytes())
            .map_err(|e| e.to_string())?;
    }
    let out = child.wait_with_output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(())
}

fn artifacts(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let mut bytes = std::fs::read(entry.path()).map_err(|e| e.to_string())?;
        if name.ends_with(".config.toml") {
            let text = String::from_utf8_lossy(&bytes).into_owned();
            bytes = text
                .lines()
                .filter(|l| !l.starts_with("out_dir"))
                .collect::<Vec<_>>()
                .join("\n")
                .into_bytes();
        }
        files.insert(name, bytes);
    }
    Ok(files)
}

fn reproducibility() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        cli(&dir, &["prepare", "--synthetic"], None)?;
        cli(&dir, &["train-lm"], None)?;
        cli(&dir, &["train-reward"], None)?;
        cli(&dir, &["ppo"], None)?;
        cli(&dir, &["eval"], None)?;
        cli(&dir, &["chat"], Some("hello there\nhow was the trip ?\n"))?;
        runs.push(artifacts(&dir)?);
    }
    let differing: Vec<&String> = runs[0]
        .iter()
        .filter(|(k, v)| runs[1].get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    check(
        differing.is_empty() && runs[0].len() == runs[1].len(),
        format!(
            "{} artifacts over six subcommands, differing: {differing:?}",
            runs[0].len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Check); 6] = [
        ("1 chain-rule consistency", chain_rule),
        ("2 gradient integrity", gradients),
        ("3 circumplex reward properties", reward_properties),
        ("4 KL-shaped reward identities", shaping_identities),
        ("5 reward-model learnability", reward_learnability),
        ("8 oracle consistency", oracle_consistency),
    ];
    let mut failed = 0;
    let mut report = |name: &str, result: Check| match &result {
        Ok(detail) => println!("PASS  criterion {name}: {detail}"),
        Err(detail) => {
            failed += 1;
            println!("FAIL  criterion {name}: {detail}")
        }
    };
    for (name, f) in criteria {
        report(name, f());
    }
    match desk() {
        Ok(d) => {
            report("6 end-to-end reward uplift", uplift(&d));
            report("7 KL control", kl_control(&d));
        }
        Err(e) => {
            report(
                "6 end-to-end reward uplift",
                Err(format!("desk setup: {e}")),
            );
            report("7 KL control", Err(format!("desk setup: {e}")));
        }
    }
    report("9 reproducibility", reproducibility());
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
