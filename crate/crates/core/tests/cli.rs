use std::path::Path;
use std::process::{Command, Output};

const MINIMAL: &str = "\
[task]
name = dispersion
horizon = 50

[model]
feature_hidden = 16
critic_hidden = 16
embed = 8
heads = 2
blocks = 1
ff = 16
rank = 2

[train]
envs = 4
";

fn mmrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmrl"))
        .args(args)
        .env("MMRL_THREADS", "1")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let cfg = write_config(dir, MINIMAL);
    let out = dir.join(out);
    let mut args = vec!["train", &cfg, "--steps", "1000", "--quiet", "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    mmrl(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_checkpoint_metrics_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), "run", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    assert!(run.join("checkpoint.mmrl").is_file());
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().count() >= 1);
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in [
        "update",
        "env_steps",
        "mean_reward",
        "completion_rate",
        "episode_len_mean",
        "nmd_target_mean",
        "nmd_realized_mean",
        "nmd_max_rel_gap",
        "alpha_mean",
        "euler_residual_mean",
        "policy_loss",
        "value_loss",
        "entropy",
        "grad_norm",
        "seconds",
    ] {
        assert!(first.get(key).is_some(), "metrics lack {key}");
    }
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["ablation"], false);
}

#[test]
fn single_query_flag_is_recorded_as_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), "run", &["--single-query"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["ablation"], true);
}

#[test]
fn unknown_key_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nleraning_rate = 0.01\n");
    let o = mmrl(&["train", &cfg, "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("leraning_rate"), "{}", stderr(&o));
}

#[test]
fn eval_is_repeatable_and_rejects_bad_perturbations() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path(), "run", &[]).status.success());
    let ck = dir.path().join("run/checkpoint.mmrl");
    let ck = ck.to_str().unwrap();
    let a = mmrl(&["eval", "--checkpoint", ck, "--episodes", "4", "--seed", "3"]);
    let b = mmrl(&["eval", "--checkpoint", ck, "--episodes", "4", "--seed", "3"]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8_lossy(&a.stdout);
    for key in ["completion_rate:", "mean_reward:", "mean_episode_len:"] {
        assert!(text.contains(key), "{text}");
    }
    let bad = mmrl(&["eval", "--checkpoint", ck, "--perturb", "teleport:1@2"]);
    assert_eq!(bad.status.code(), Some(2), "{}", stderr(&bad));

    let single = mmrl(&["eval", "--checkpoint", ck, "--episodes", "1", "--nmd-des", "0.8"]);
    assert!(single.status.success());
    assert!(stderr(&single).contains("note:"));
}

#[test]
fn export_writes_records() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path(), "run", &[]).status.success());
    let ck = dir.path().join("run/checkpoint.mmrl");
    let out = dir.path().join("export.jsonl");
    let o = mmrl(&[
        "export",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--env",
        "dispersion",
        "--episodes",
        "8",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(&out).unwrap().lines().count() >= 8);
}

#[test]
fn verify_passes_and_catches_an_injected_sign_error() {
    let o = mmrl(&["verify", "--suite", "all"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{text}");
    let summary = text.lines().last().unwrap();
    let suites: usize = summary.split_whitespace().next().unwrap().parse().unwrap();
    assert!(suites >= 6, "{summary}");

    let m = mmrl(&["verify", "--suite", "gradient", "--mutate", "nmd-grad-sign"]);
    assert_eq!(m.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&m.stdout).contains("[FAIL]"));
}

#[test]
fn identical_arguments_reproduce_outputs() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path(), "a", &["--seed", "5"]).status.success());
    assert!(train(dir.path(), "b", &["--seed", "5"]).status.success());
    let strip = |p: &Path| -> Vec<serde_json::Value> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v["seconds"] = 0.into();
                v
            })
            .collect()
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(strip(&a.join("metrics.jsonl")), strip(&b.join("metrics.jsonl")));
    assert_eq!(
        std::fs::read(a.join("checkpoint.mmrl")).unwrap(),
        std::fs::read(b.join("checkpoint.mmrl")).unwrap()
    );
}
