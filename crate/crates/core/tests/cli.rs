use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

const SMALL: [&str; 8] = [
    "dialogues=20",
    "lm_steps=20",
    "rm_steps=50",
    "episodes=1",
    "rollouts=4",
    "minibatch=2",
    "prompts=8",
    "eval_samples=8",
];

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_circumplex-rl"));
    cmd.env_remove("CIRCUMPLEX_RL_OUT");
    cmd
}

fn run_with(dir: &Path, args: &[&str], stdin: &[u8]) -> Output {
    let mut cmd = bin();
    cmd.args(args).arg("--out").arg(dir);
    for s in SMALL {
        cmd.args(["--set", s]);
    }
    let mut child = cmd
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin).unwrap();
    child.wait_with_output().unwrap()
}

fn run(dir: &Path, args: &[&str]) -> Output {
    run_with(dir, args, b"")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn trained(dir: &Path) {
    ok(run(dir, &["prepare", "--synthetic"]));
    ok(run(dir, &["train-lm"]));
    ok(run(dir, &["train-reward"]));
}

#[test]
fn prepare_writes_consistent_summary() {
    let tmp = tempfile::tempdir().unwrap();
    ok(run(tmp.path(), &["prepare", "--synthetic"]));
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(tmp.path().join("data_summary.json")).unwrap(),
    )
    .unwrap();
    let total: u64 = summary["labels"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(total, summary["utterances"].as_u64().unwrap());
    assert_eq!(summary["labels"].as_object().unwrap().len(), 7);
    assert_eq!(summary["dialogues"].as_u64().unwrap(), 20);
    let corpus = std::fs::read_to_string(tmp.path().join("corpus.jsonl")).unwrap();
    assert_eq!(corpus.lines().count() as u64, total);
    assert!(tmp.path().join("prepare.config.toml").exists());
}

#[test]
fn meld_csv_is_read_and_missing_column_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let good = tmp.path().join("good.csv");
    std::fs::write(
        &good,
        "Sr No.,Utterance,Speaker,Emotion,Sentiment,Dialogue_ID,Utterance_ID\n\
         1,How are you?,Ann,neutral,neutral,0,0\n\
         2,\"Great, thanks!\",Bo,joy,positive,0,1\n\
         3,Oh no.,Ann,sadness,negative,1,0\n",
    )
    .unwrap();
    let out_dir = tmp.path().join("run");
    ok(run(
        &out_dir,
        &["prepare", "--meld", good.to_str().unwrap()],
    ));
    let summary = std::fs::read_to_string(out_dir.join("data_summary.json")).unwrap();
    assert!(summary.contains("\"utterances\": 3"), "{summary}");

    let bad = tmp.path().join("bad.csv");
    std::fs::write(
        &bad,
        "Utterance,Speaker,Dialogue_ID,Utterance_ID\nhi,Ann,0,0\n",
    )
    .unwrap();
    let out = run(&out_dir, &["prepare", "--meld", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Emotion"), "{}", stderr(&out));

    let label = tmp.path().join("label.csv");
    std::fs::write(
        &label,
        "Utterance,Speaker,Emotion,Dialogue_ID,Utterance_ID\nhi,Ann,bored,0,0\n",
    )
    .unwrap();
    let out = run(&out_dir, &["prepare", "--meld", label.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bored"));
}

#[test]
fn missing_upstream_artifact_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["train-lm"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("corpus.jsonl"), "{}", stderr(&out));

    ok(run(tmp.path(), &["prepare", "--synthetic"]));
    let out = run(tmp.path(), &["train-reward"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("lm.ckpt"));
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["eval", "--samples", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("samples"));

    let out = run(tmp.path(), &["prepare", "--set", "epsiodes=3"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(tmp.path(), &["prepare", "--set", "clip_eps=2"]);
    assert_eq!(out.status.code(), Some(2));
    let out = bin().arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "episodes = \"ten\"\n").unwrap();
    let out = run(tmp.path(), &["prepare", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(tmp.path(), &["prepare", "--config", "/nonexistent.toml"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn zero_episodes_copy_the_language_model() {
    let tmp = tempfile::tempdir().unwrap();
    trained(tmp.path());
    ok(run(tmp.path(), &["ppo", "--episodes", "0"]));
    let lm = std::fs::read(tmp.path().join("lm.ckpt")).unwrap();
    let policy = std::fs::read(tmp.path().join("policy.ckpt")).unwrap();
    assert_eq!(lm, policy);
    let metrics = std::fs::read_to_string(tmp.path().join("ppo_metrics.jsonl")).unwrap();
    assert!(metrics.is_empty());
}

#[test]
fn full_pipeline_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for d in &dirs {
        trained(d);
        ok(run(d, &["ppo"]));
        ok(run(d, &["eval"]));
    }
    for f in [
        "lm.ckpt",
        "reward.ckpt",
        "policy.ckpt",
        "lm_metrics.jsonl",
        "ppo_metrics.jsonl",
        "eval.jsonl",
        "eval_summary.json",
    ] {
        assert_eq!(
            std::fs::read(dirs[0].join(f)).unwrap(),
            std::fs::read(dirs[1].join(f)).unwrap(),
            "{f}"
        );
    }
    let eval = std::fs::read_to_string(dirs[0].join("eval.jsonl")).unwrap();
    assert_eq!(eval.lines().count(), 8);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dirs[0].join("eval_summary.json")).unwrap())
            .unwrap();
    let pos = summary["positive_fraction"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&pos));
    assert_eq!(summary["expected_reward"]["n"].as_u64(), Some(8));

    let other = run(&dirs[1], &["train-lm", "--seed", "6"]);
    ok(other);
    assert_ne!(
        std::fs::read(dirs[0].join("lm.ckpt")).unwrap(),
        std::fs::read(dirs[1].join("lm.ckpt")).unwrap()
    );
}

#[test]
fn chat_skips_bad_lines_and_logs() {
    let tmp = tempfile::tempdir().unwrap();
    trained(tmp.path());
    let lm = tmp.path().join("lm.ckpt");
    let out = run_with(
        tmp.path(),
        &["chat", "--checkpoint", lm.to_str().unwrap()],
        b"hello there\n\n\xff\xfe\nhow was your day ?\n",
    );
    let err = stderr(&out);
    let stdout = ok(out);
    assert!(err.contains("UTF-8"), "{err}");
    assert_eq!(stdout.matches("reward").count(), 2, "{stdout}");
    let log = std::fs::read_to_string(tmp.path().join("chat.log")).unwrap();
    assert_eq!(log.matches("user: ").count(), 2);
    assert!(log.contains("user: hello there"));
}

#[test]
fn out_dir_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cmd = bin();
    cmd.env("CIRCUMPLEX_RL_OUT", tmp.path())
        .args(["prepare", "--synthetic", "--dialogues", "3"]);
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(tmp.path().join("corpus.jsonl").exists());
    let snapshot = std::fs::read_to_string(tmp.path().join("prepare.config.toml")).unwrap();
    assert!(snapshot.contains("dialogues = 3"));
}
