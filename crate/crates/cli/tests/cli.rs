use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn corpus(name: &str, lang: &str, n: usize, seed: u64) -> Value {
    json!({
        "name": name,
        "domain": "read",
        "n_utts": n,
        "len_range": [3, 6],
        "language": {"code": lang, "display_name": lang},
        "seed": seed,
    })
}

/// A small run config with corpora under `<dir>/corpora`.
fn write_config(dir: &Path) -> PathBuf {
    let c = |name: &str| format!("corpora/{name}.jsonl");
    let cfg = json!({
        "toy": {"task": {"noise_sigma": 0.3}},
        "projector": {"k": 5, "hidden": 32},
        "train": {
            "lr_max": 1e-3, "warmup_steps": 10, "max_steps": 60, "batch_size": 4,
            "epochs": 1000, "eval_every": 20, "patience": 3, "seed": 0
        },
        "data": {"train": c("en-train"), "val": c("en-dev"), "tests": [c("en-test")]},
        "sweep": {"budgets_hours": [0.001, 0.002], "seeds": [0]},
        "bootstrap": {
            "sources": [{"label": "EN", "parts": [{"manifest": c("en-train")}], "val": c("en-dev")}],
            "target_pool": c("gl-train"),
            "target_val": c("gl-dev"),
            "tests": [c("gl-test")],
            "budgets_hours": [0.001],
            "seeds": [0]
        },
        "synth": {"corpora": [
            corpus("en-train", "en", 40, 1),
            corpus("en-dev", "en", 10, 2),
            corpus("en-test", "en", 10, 3),
            corpus("gl-train", "gl", 20, 4),
            corpus("gl-dev", "gl", 10, 5),
            corpus("gl-test", "gl", 10, 6),
        ]}
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_speechbridge"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup() -> TempDir {
    let tmp = TempDir::new().unwrap();
    write_config(tmp.path());
    ok(
        tmp.path(),
        &["synth", "--config", "config.json", "--out", "corpora"],
    );
    tmp
}

#[test]
fn synth_train_evaluate_decode() {
    let tmp = setup();
    let d = tmp.path();
    assert!(d.join("corpora/en-train.jsonl").exists());
    assert!(d.join("corpora/task.json").exists());

    ok(d, &["train", "--config", "config.json", "--out", "model"]);
    for f in ["projector.ckpt", "history.csv", "summary.json", "run.json"] {
        assert!(d.join("model").join(f).exists(), "missing {f}");
    }
    assert!(!d.join("model.partial").exists());

    let out = ok(
        d,
        &[
            "evaluate",
            "--config",
            "config.json",
            "--checkpoint",
            "model/projector.ckpt",
            "--out",
            "eval",
        ],
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("en-test"), "{stdout}");
    let report: Value =
        serde_json::from_str(&fs::read_to_string(d.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 1);

    ok(
        d,
        &[
            "decode",
            "--config",
            "config.json",
            "--checkpoint",
            "model/projector.ckpt",
            "--manifest",
            "corpora/en-test.jsonl",
            "--out",
            "hyp",
        ],
    );
    let text = fs::read_to_string(d.join("hyp/hypotheses.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 10);
    for l in lines {
        let v: Value = serde_json::from_str(l).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 4);
        for k in ["id", "hypothesis", "logprob", "n_tokens"] {
            assert!(keys.contains(&k), "missing {k} in {l}");
        }
    }
}

#[test]
fn existing_output_needs_force_or_resume() {
    let tmp = setup();
    let d = tmp.path();
    let args = [
        "subset",
        "--manifest",
        "corpora/en-train.jsonl",
        "--hours",
        "0.001",
        "--out",
        "sub",
    ];
    ok(d, &args);
    let first = fs::read_to_string(d.join("sub/subset.jsonl")).unwrap();

    let again = run(d, &args);
    assert_eq!(again.status.code(), Some(2));

    let mut resume = args.to_vec();
    resume.push("--resume");
    let out = ok(d, &resume);
    assert!(String::from_utf8_lossy(&out.stderr).contains("up to date"));

    let mut force = args.to_vec();
    force.push("--force");
    ok(d, &force);
    assert_eq!(
        fs::read_to_string(d.join("sub/subset.jsonl")).unwrap(),
        first
    );

    let both = run(d, &[&args[..], &["--force", "--resume"]].concat());
    assert_eq!(both.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let tmp = setup();
    let d = tmp.path();
    assert_eq!(run(d, &["train", "--bogus"]).status.code(), Some(2));

    let bad = d.join("bad.json");
    fs::write(&bad, r#"{"train": {"learning_rate": 1.0}}"#).unwrap();
    let out = run(d, &["train", "--config", "bad.json", "--out", "x"]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out = run(
        d,
        &[
            "subset",
            "--manifest",
            "corpora/en-train.jsonl",
            "--hours",
            "100",
            "--out",
            "big",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(!d.join("big").exists());
    assert!(!d.join("big.partial").exists());

    let out = run(
        d,
        &[
            "evaluate",
            "--checkpoint",
            "missing.ckpt",
            "--test",
            "corpora/en-test.jsonl",
            "--out",
            "e",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn finetune_and_report_merge() {
    let tmp = setup();
    let d = tmp.path();
    ok(d, &["train", "--config", "config.json", "--out", "en"]);
    ok(
        d,
        &[
            "finetune",
            "--config",
            "config.json",
            "--pretrained-ckpt",
            "en/projector.ckpt",
            "--train",
            "corpora/gl-train.jsonl",
            "--val",
            "corpora/gl-dev.jsonl",
            "--lora",
            "--out",
            "gl",
        ],
    );
    assert!(d.join("gl/lora.bin").exists());
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(d.join("gl/summary.json")).unwrap()).unwrap();
    assert_eq!(
        summary["header"]["provenance"],
        json!(["en-train", "gl-train"])
    );
    assert_eq!(summary["header"]["language"], "gl");

    ok(
        d,
        &[
            "evaluate",
            "--config",
            "config.json",
            "--checkpoint",
            "en/projector.ckpt",
            "--out",
            "e1",
        ],
    );
    ok(
        d,
        &[
            "evaluate",
            "--config",
            "config.json",
            "--checkpoint",
            "gl/projector.ckpt",
            "--lora",
            "gl/lora.bin",
            "--test",
            "corpora/gl-test.jsonl",
            "--out",
            "e2",
        ],
    );
    ok(d, &["report", "e1", "e2/report.json", "--out", "merged"]);
    let merged: Value =
        serde_json::from_str(&fs::read_to_string(d.join("merged/report.json")).unwrap()).unwrap();
    assert_eq!(merged["rows"].as_array().unwrap().len(), 2);
    assert_eq!(merged["columns"].as_array().unwrap().len(), 2);
}

#[test]
fn sweep_and_bootstrap_resume() {
    let tmp = setup();
    let d = tmp.path();
    ok(
        d,
        &["scaling-sweep", "--config", "config.json", "--out", "sweep"],
    );
    for f in ["report.json", "runs.json", "scaling.dat", "scaling.gp"] {
        assert!(d.join("sweep").join(f).exists(), "missing {f}");
    }
    let dat = fs::read_to_string(d.join("sweep/scaling.dat")).unwrap();
    assert_eq!(dat.lines().count(), 3);
    let out = ok(
        d,
        &[
            "scaling-sweep",
            "--config",
            "config.json",
            "--out",
            "sweep",
            "--resume",
        ],
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("up to date"));

    ok(
        d,
        &[
            "bootstrap-matrix",
            "--config",
            "config.json",
            "--out",
            "boot",
        ],
    );
    let grid = fs::read_to_string(d.join("boot/grid.txt")).unwrap();
    assert!(grid.contains("Scratch") && grid.contains("EN→"), "{grid}");
}
