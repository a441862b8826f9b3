use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lacuna_core::synthetic::name_corpus;

fn lacuna(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_lacuna")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "lacuna {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_raw(dir: &Path) {
    let corpus = name_corpus(4, 80, 0);
    let mut raw = String::new();
    for (i, pair) in corpus.train.chunks(2).enumerate() {
        raw.push_str(&format!(
            "{}\t{} {}\tregion=attica\n",
            i + 1,
            pair[0].text,
            pair[1].text
        ));
    }
    fs::write(dir.join("part1.tsv"), raw).unwrap();
}

#[test]
fn pipeline_train_eval_restore_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    let data = tmp.path().join("data");
    fs::create_dir_all(&raw).unwrap();
    write_raw(&raw);
    let alphabet = tmp.path().join("alphabet.tsv");
    let p = |p: &Path| p.to_str().unwrap().to_string();

    let out = lacuna(&[
        "pipeline",
        "build",
        "--raw",
        &p(&raw),
        "--out",
        &p(&data),
        "--alphabet",
        &p(&alphabet),
    ]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["report"]["kept"], 40);
    assert!(alphabet.exists());
    assert!(data.join("train.jsonl").exists());

    let ckpt = tmp.path().join("model.ckpt");
    let out = lacuna(&[
        "train",
        "--data",
        &p(&data),
        "--variant",
        "bi-word",
        "--steps",
        "4",
        "--seed",
        "3",
        "--out",
        &p(&ckpt),
        "--hidden",
        "8",
        "--char-dim",
        "6",
        "--word-dim",
        "4",
        "--batch-size",
        "2",
        "--checkpoint-every",
        "2",
        "--valid-beam",
        "2",
        "--valid-top-k",
        "1",
        "--valid-limit",
        "2",
        "--dropout",
        "0",
    ]);
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(
        lines.iter().map(|l| l["step"].as_u64().unwrap()).collect::<Vec<_>>(),
        vec![0, 2, 4]
    );
    assert!(lines[1]["loss"].as_f64().unwrap() > 0.0);
    assert!(lines.iter().all(|l| l["valid_cer"].is_number()));
    assert!(ckpt.exists());
    assert!(tmp.path().join("model.ckpt.last").exists());
    assert!(tmp.path().join("model.ckpt.vocab.tsv").exists());

    let out = lacuna(&[
        "eval",
        "--model",
        &p(&ckpt),
        "--data",
        &p(&data),
        "--split",
        "train",
        "--beam",
        "3",
        "--limit",
        "2",
        "--sweep",
        "20,50",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("\"cer\""));
    assert!(text.contains("context\ttop20\tcer"));
    assert!(text.lines().any(|l| l.starts_with("50\t")));

    let out = lacuna(&[
        "restore",
        "--model",
        &p(&ckpt),
        "--text",
        "εδοξε τω δημω ??? ανηρ αγαθος",
        "--beam",
        "5",
        "--top",
        "3",
        "--json",
    ]);
    let hyps: Vec<serde_json::Value> = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(hyps.len(), 3);
    assert!(hyps.iter().all(|h| h["text"].as_str().unwrap().chars().count() == 3));
}

#[test]
fn language_model_trains_and_restores() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    let data = tmp.path().join("data");
    fs::create_dir_all(&raw).unwrap();
    write_raw(&raw);
    let p = |p: &Path| p.to_str().unwrap().to_string();
    let alphabet = tmp.path().join("alphabet.tsv");
    lacuna(&[
        "pipeline",
        "build",
        "--raw",
        &p(&raw),
        "--out",
        &p(&data),
        "--alphabet",
        &p(&alphabet),
    ]);
    let ckpt = tmp.path().join("lm.ckpt");
    lacuna(&[
        "train",
        "--arch",
        "lm",
        "--data",
        &p(&data),
        "--steps",
        "2",
        "--out",
        &p(&ckpt),
        "--hidden",
        "8",
        "--char-dim",
        "6",
        "--batch-size",
        "2",
        "--checkpoint-every",
        "1",
    ]);
    let out = lacuna(&[
        "restore",
        "--model",
        &p(&ckpt),
        "--text",
        "και ?? της",
        "--beam",
        "4",
        "--top",
        "2",
    ]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 2);
    let err = Command::new(env!("CARGO_BIN_EXE_lacuna"))
        .args(["eval", "--model", &p(&ckpt), "--data", &p(&data), "--arch", "seq2seq"])
        .output()
        .unwrap();
    assert!(!err.status.success());
}
