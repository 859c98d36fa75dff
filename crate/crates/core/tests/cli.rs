use std::path::Path;
use std::process::{Command, Output};

use casnet::film::{Model, ModelConfig};

fn casnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_casnet")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = casnet(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

const CORPUS: &str = r#"{"segment_s": 0.25, "n_train": 3, "n_valid": 2, "n_test": 2, "n_channels": 3, "holdout_channel": 2,
  "speakers": {"train": [0, 1, 2, 3], "valid": [4, 5], "test": [6, 7]}}"#;

const TRAIN: &str = r#"{"epochs": 2, "batch_size": 2, "steps_per_epoch": 2, "lr_init": 0.001,
  "separator": {"enc_dim": 8, "win": 16, "stride": 8, "n_blocks": 1, "chunk_size": 10, "hidden": 4},
  "channel_encoder": {"n_blocks": 1, "width": 4, "embed_dim": 4, "se_reduction": 2}}"#;

#[test]
fn help_documents_flags_and_unknown_flags_fail() {
    let h = ok(&["train", "--help"]);
    for flag in ["--strategy", "--gamma", "--baseline", "--extra-blocks", "--seed", "--corpus", "--out"] {
        assert!(h.contains(flag), "train --help lacks {flag}");
    }
    let h = ok(&["eval", "--help"]);
    for v in ["--emb-source", "--json", "same", "other-same-channel", "all-ones", "no-film", "gaussian"] {
        assert!(h.contains(v), "eval --help lacks {v}");
    }
    assert_eq!(casnet(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(casnet(&["eval"]).status.code(), Some(1));
}

#[test]
fn io_and_validation_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = casnet(&["gen-corpus", "--config", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
    let bad = dir.path().join("bad.json");
    write(&bad, r#"{"n_channels": 2, "holdout_channel": 1}"#);
    let o = casnet(&["gen-corpus", "--config", bad.to_str().unwrap(), "--out", dir.path().join("c").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let typo = dir.path().join("typo.json");
    write(&typo, r#"{"n_trian": 3}"#);
    let o = casnet(&["gen-corpus", "--config", typo.to_str().unwrap(), "--out", dir.path().join("d").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn grad_check_passes() {
    let out = ok(&["grad-check"]);
    assert!(out.contains("all") && out.contains("passed"), "{out}");
    assert!(!out.contains("FAIL"));
}

#[test]
fn pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    write(&dir.path().join("corpus.json"), CORPUS);
    write(&dir.path().join("train.json"), TRAIN);

    let o = casnet(&["gen-corpus", "--config", &d("corpus.json"), "--out", &d("corpus")]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed: 0"));

    for run in ["r1", "r2"] {
        let o = casnet(&[
            "train", "--config", &d("train.json"), "--corpus", &d("corpus"), "--out", &d(run), "--strategy", "perturb",
            "--gamma", "0.01", "--seed", "4",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains("seed: 4") && err.contains("\"gamma\":0.01"), "{err}");
    }
    for f in ["best.ckpt", "last.ckpt", "metrics.csv", "steps.csv"] {
        assert_eq!(std::fs::read(dir.path().join("r1").join(f)).unwrap(), std::fs::read(dir.path().join("r2").join(f)).unwrap(), "{f}");
    }

    let ck = d("r1/best.ckpt");
    let mut summaries = Vec::new();
    for src in ["same", "gaussian", "other-same-channel", "all-ones", "no-film"] {
        let csv = d(&format!("{src}.csv"));
        let a = ok(&["eval", &ck, "--corpus", &d("corpus"), "--emb-source", src, "--csv", &csv, "--seed", "2"]);
        let b = ok(&["eval", &ck, "--corpus", &d("corpus"), "--emb-source", src, "--seed", "2"]);
        assert_eq!(a, b);
        summaries.push(csv);
    }
    let j: serde_json::Value = serde_json::from_str(&ok(&["eval", &ck, "--corpus", &d("corpus"), "--json"])).unwrap();
    assert_eq!(j["channels"], serde_json::json!([2]));
    assert_eq!(j["per_mixture"].as_array().unwrap().len(), 2);
    assert_eq!(j["gamma"], serde_json::json!(0.01));

    let mut args = vec!["compare"];
    args.extend(summaries.iter().map(String::as_str));
    let merged = d("merged.csv");
    args.extend(["--out", &merged]);
    let table = ok(&args);
    assert_eq!(table.lines().count(), 2 + 5);
    let mut rd = csv::Reader::from_path(&merged).unwrap();
    assert_eq!(rd.records().count(), 5);

    let emb = d("emb.jsonl");
    ok(&["embed", &ck, "--corpus", &d("corpus"), "--out", &emb]);
    let lines: Vec<serde_json::Value> =
        std::fs::read_to_string(&emb).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2 * 3);
    assert_eq!(lines[0]["vector"].as_array().unwrap().len(), 4);
}

#[test]
fn no_film_matches_baseline_with_shared_weights() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    write(&dir.path().join("corpus.json"), CORPUS);
    ok(&["gen-corpus", "--config", &d("corpus.json"), "--out", &d("corpus")]);

    let sep = casnet::separator::SeparatorConfig { enc_dim: 8, chunk_size: 10, hidden: 4, n_blocks: 1, ..Default::default() };
    let ce = casnet::chanenc::ChannelEncoderConfig { n_blocks: 1, width: 4, embed_dim: 4, n_channel_classes: 3, se_reduction: 2 };
    let (full, full_store) = Model::new(&ModelConfig::casnet(sep.clone(), ce), 9).unwrap();
    let (base, mut base_store) = Model::new(&ModelConfig::baseline(sep), 1).unwrap();
    base_store.copy_matching(&full_store).unwrap();
    full.to_checkpoint(&full_store).unwrap().save(Path::new(&d("full.ckpt"))).unwrap();
    base.to_checkpoint(&base_store).unwrap().save(Path::new(&d("base.ckpt"))).unwrap();

    let score = |ck: &str| -> serde_json::Value {
        let j: serde_json::Value =
            serde_json::from_str(&ok(&["eval", ck, "--corpus", &d("corpus"), "--emb-source", "no-film", "--json"])).unwrap();
        j["per_mixture"].clone()
    };
    assert_eq!(score(&d("full.ckpt")), score(&d("base.ckpt")));
    assert_eq!(casnet(&["eval", &d("base.ckpt"), "--corpus", &d("corpus"), "--emb-source", "same"]).status.code(), Some(1));
}
