use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[stft]
frames = 16

[network]
depth = 1
blocks_per_level = 1
base_channels = 4
channel_multipliers = [1]
time_embed_dim = 16
embed_hidden_dim = 8

[sampler]
n_steps = 3

[training]
max_steps = 2
warmup_steps = 1
batch_size = 2
validation_samples = 0

[data]
train_manifest = "corpus/train.jsonl"
test_manifest = "corpus/test.jsonl"

[data.synthetic]
train_speakers_per_family = 1
valid_speakers_per_family = 1
test_speakers_per_family = 1
train_mixtures = 4
valid_mixtures = 1
test_mixtures = 3
utterance_secs = 0.3
enrollment_secs = 1.0

[embeddings]
path = "corpus/embeddings.jsonl"
"#;

fn tse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tse"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("tse runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), CONFIG).unwrap();
    ok(&tse(dir.path(), &["--config", "c.toml", "synth", "--out", "corpus"]));
    dir
}

#[test]
fn print_config_shows_reference_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&tse(dir.path(), &["--print-config"]));
    for line in [
        "gamma = 2.0",
        "sigma_min = 0.05",
        "sigma_max = 0.5",
        "alpha = 0.5",
        "beta = 0.15",
        "n_steps = 30",
        "snr = 0.5",
        "learning_rate = 0.0005",
        "warmup_steps = 2000",
        "n_fft = 254",
        "hop = 64",
        "frames = 256",
    ] {
        assert!(text.lines().any(|l| l == line), "missing {line}");
    }
    let seeded = ok(&tse(dir.path(), &["--seed", "9", "--print-config"]));
    assert!(seeded.starts_with("seed = 9\n"));
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[sde]\ngama = 3.0\n").unwrap();
    let out = tse(dir.path(), &["--config", "bad.toml", "--print-config"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gama"));
    std::fs::write(dir.path().join("bad.toml"), "[stft]\nframes = 31\n").unwrap();
    assert_eq!(tse(dir.path(), &["--config", "bad.toml", "--print-config"]).status.code(), Some(2));
    // Training without a manifest is a configuration problem.
    assert_eq!(tse(dir.path(), &["train"]).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), CONFIG).unwrap();
    let out = tse(dir.path(), &["--config", "c.toml", "train", "--out", "run"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn finetune_rejects_several_target_speakers() {
    let dir = setup();
    let p = dir.path();
    ok(&tse(p, &["--config", "c.toml", "train", "--out", "run"]));
    let out = tse(p, &["--config", "c.toml", "finetune", "--out", "ft", "--base", "run/model.ckpt"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("single target speaker"));
    let out = tse(p, &["--config", "c.toml", "finetune", "--out", "ft", "--base", "run/model.ckpt", "--speaker", "nobody"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = setup();
    let p = dir.path();
    std::fs::write(p.join("long.toml"), CONFIG.replace("max_steps = 2", "max_steps = 4")).unwrap();
    ok(&tse(p, &["--config", "c.toml", "train", "--out", "split"]));
    ok(&tse(p, &["--config", "long.toml", "train", "--out", "split", "--resume"]));
    ok(&tse(p, &["--config", "long.toml", "train", "--out", "whole"]));
    let a = std::fs::read(p.join("split/model.ckpt")).unwrap();
    let b = std::fs::read(p.join("whole/model.ckpt")).unwrap();
    assert_eq!(a, b);
    let steps = std::fs::read_to_string(p.join("split/train_log.jsonl")).unwrap().lines().count();
    assert_eq!(steps, 4);
}

#[test]
fn extraction_does_not_depend_on_worker_count() {
    let dir = setup();
    let p = dir.path();
    ok(&tse(p, &["--config", "c.toml", "train", "--out", "run"]));
    for (jobs, out) in [("1", "e1"), ("3", "e3")] {
        ok(&tse(
            p,
            &["--config", "c.toml", "--jobs", jobs, "extract", "--checkpoint", "run/model.ckpt", "--manifest", "corpus/test.jsonl", "--out", out],
        ));
    }
    for i in 0..3 {
        let name = format!("test{i:04}.wav");
        assert_eq!(std::fs::read(p.join("e1").join(&name)).unwrap(), std::fs::read(p.join("e3").join(&name)).unwrap());
    }
    let report = ok(&tse(
        p,
        &["--config", "c.toml", "evaluate", "--manifest", "corpus/test.jsonl", "--estimates", "e1", "--out", "report.jsonl"],
    ));
    assert!(!report.is_empty());
    let rows = std::fs::read_to_string(p.join("report.jsonl")).unwrap();
    assert_eq!(rows.lines().filter(|l| l.contains("\"type\":\"row\"")).count(), 3);
}

#[test]
fn evaluate_reports_missing_estimates_with_code_3() {
    let dir = setup();
    let p = dir.path();
    std::fs::create_dir(p.join("empty")).unwrap();
    let out = tse(
        p,
        &["--config", "c.toml", "evaluate", "--manifest", "corpus/test.jsonl", "--estimates", "empty", "--out", "r.jsonl"],
    );
    assert_eq!(out.status.code(), Some(3));
    let rows = std::fs::read_to_string(p.join("r.jsonl")).unwrap();
    assert_eq!(rows.lines().filter(|l| l.contains("\"type\":\"failed\"")).count(), 3);
}
