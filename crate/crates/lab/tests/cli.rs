use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rlrs_lab::checkpoint::Checkpoint;
use serde_json::Value;

/// Tiny MoE used by every command; `edits` replace (or with `None` drop) keys.
const TINY: [(&str, &str); 12] = [
    ("model.d_model", "8"),
    ("model.n_layers", "1"),
    ("model.n_heads", "2"),
    ("model.ff_multiplier", "2"),
    ("model.n_experts", "2"),
    ("model.vocab_size", "8"),
    ("model.seq_len", "4"),
    ("schedule.eta_base", "0.01"),
    ("schedule.total_steps", "100"),
    ("train.batch_size", "2"),
    ("data.synthetic.vocab_size", "8"),
    ("data.synthetic.length", "512"),
];

fn rlrs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlrs")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, edits: &[(&str, Option<&str>)]) -> String {
    let mut text = String::from("# command-line test config\n");
    for (k, v) in TINY {
        match edits.iter().find(|(e, _)| *e == k) {
            Some((_, Some(v))) => text.push_str(&format!("{k} = {v}\n")),
            Some((_, None)) => {}
            None => text.push_str(&format!("{k} = {v}\n")),
        }
    }
    for (k, v) in edits {
        if let (false, Some(v)) = (TINY.iter().any(|(t, _)| t == k), v) {
            text.push_str(&format!("{k} = {v}\n"));
        }
    }
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn file_data(path: &str) -> [(&str, Option<&str>); 5] {
    [
        ("model.vocab_size", Some("256")),
        ("data.synthetic.vocab_size", None),
        ("data.synthetic.length", None),
        ("data.source", Some("file")),
        ("data.path", Some(path)),
    ]
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn presets_print_config_lines() {
    let out = rlrs(&["presets", "--kind", "moe"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("rlrs.experts.start = 0.3"));
    assert!(text.contains("rlrs.experts.end = 1.125"));
    let dense = String::from_utf8(rlrs(&["presets", "--kind", "dense"]).stdout).unwrap();
    assert!(dense.contains("rlrs.feedforward.end = 0.6"));
}

#[test]
fn train_writes_run_files_and_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.conf", &[("train.init_seed", Some("4"))]);
    let out = dir.path().join("out");
    let o = out.to_str().unwrap();
    assert_eq!(rlrs(&["train", "--config", &cfg, "--out", o, "--data-seed", "9"]).status.code(), Some(0));
    let curve = fs::read(out.join("tiny.curve.csv")).unwrap();
    let meta = json(&out.join("tiny.meta.json"));
    assert_eq!(meta["init_seed"], 4);
    assert_eq!(meta["data_seed"], 9);
    assert_eq!(meta["config"]["train.data_seed"], "9");
    assert_eq!(String::from_utf8_lossy(&curve).lines().count(), 102);

    assert_eq!(rlrs(&["train", "--config", &cfg, "--out", o, "--data-seed", "9"]).status.code(), Some(0));
    assert_eq!(fs::read(out.join("tiny.curve.csv")).unwrap(), curve);
    assert!(!out.join("tiny.timing.csv").exists());
}

#[test]
fn missing_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "bad.conf", &[("schedule.eta_base", None)]);
    let out = rlrs(&["train", "--config", &path, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schedule.eta_base"));

    let typo = write_config(dir.path(), "typo.conf", &[("model.widht", Some("3"))]);
    let out = rlrs(&["train", "--config", &typo, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.widht"));
}

#[test]
fn divergence_and_io_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let boom = write_config(dir.path(), "boom.conf", &[("schedule.eta_base", Some("1e12"))]);
    let out = rlrs(&["train", "--config", &boom, "--out", d]);
    assert_eq!(out.status.code(), Some(2));
    let meta = json(&dir.path().join("boom.meta.json"));
    assert_eq!(meta["complete"], false);
    assert!(meta["divergence"]["step"].as_u64().unwrap() >= 1);

    let file = write_config(dir.path(), "file.conf", &file_data("/nonexistent/corpus.txt"));
    assert_eq!(rlrs(&["train", "--config", &file, "--out", d]).status.code(), Some(3));
    assert_eq!(rlrs(&["train", "--config", "/nonexistent.conf", "--out", d]).status.code(), Some(3));
}

#[test]
fn trains_on_a_text_file_with_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    fs::write(&corpus, "the quick brown fox jumps over the lazy dog. ".repeat(40)).unwrap();
    let cfg = write_config(dir.path(), "text.conf", &file_data(corpus.to_str().unwrap()));
    let out = rlrs(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap(), "--checkpoint-every", "40", "--timing"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let ck = Checkpoint::load(&dir.path().join("text.ckpt")).unwrap();
    assert_eq!(ck.step, 100);
    let (cfg, model, opt) = ck.restore().unwrap();
    assert_eq!(cfg.model.vocab_size, 256);
    assert_eq!(model.params().len(), ck.params.len());
    assert_eq!(opt.unwrap().step_count, 100);
    assert!(dir.path().join("text.timing.csv").exists());
}

#[test]
fn compare_identical_configs_reports_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.conf", &[]);
    let out = dir.path().join("cmp");
    let o = rlrs(&["compare", "--base", &cfg, "--rlrs", &cfg, "--seeds", "0,1,2", "--out", out.to_str().unwrap(), "--jobs", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&out.join("report.json"));
    assert_eq!(report["speedup"]["percent"], 0.0);
    assert_eq!(report["rows"][1]["lr_type"], "relative");
    assert_eq!(report["rows"][0]["train_tokens"], 800);
    assert_eq!(report["runs"]["base"].as_array().unwrap().len(), 3);
    for s in 0..3 {
        assert!(out.join(format!("rlrs-seed{s}.curve.csv")).exists());
    }
}

#[test]
fn ablate_single_value_single_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.conf", &[]);
    let out = dir.path().join("abl");
    let o = rlrs(&[
        "ablate", "--config", &cfg, "--component", "experts", "--which", "start", "--values", "0.5", "--seeds", "3",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let curves: Vec<_> = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().to_string_lossy().ends_with(".curve.csv")).collect();
    assert_eq!(curves.len(), 1);
    let summary = json(&out.join("ablate.json"));
    assert_eq!(summary["values"][0]["final_losses"].as_array().unwrap().len(), 1);
}

#[test]
fn tune_writes_audit_and_best_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.conf", &[]);
    let out = dir.path().join("tune");
    let o = rlrs(&["tune", "--config", &cfg, "--mode", "rlrs", "--budget", "6", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let audit = fs::read_to_string(out.join("audit.jsonl")).unwrap();
    let summary = json(&out.join("tune.json"));
    assert_eq!(audit.lines().count() as u64, summary["evaluations"].as_u64().unwrap());
    assert!(audit.lines().count() <= 6);
    let first: Value = serde_json::from_str(audit.lines().next().unwrap()).unwrap();
    assert_eq!(first["entry"], Value::Null);
    let best = rlrs_lab::config::load(&out.join("best.conf")).unwrap();
    assert!(best.provenance.unwrap().starts_with("tune:"));
}

#[test]
fn extrapolate_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let small = write_config(dir.path(), "small.conf", &[("rlrs.preset", Some("shipped"))]);
    let large = write_config(dir.path(), "large.conf", &[("model.d_model", Some("12"))]);
    let out = dir.path().join("ext");
    let o = rlrs(&["extrapolate", "--small-result", &small, "--large-config", &large, "--grid", "2..2", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let moved = rlrs_lab::config::load(&out.join("transferred.conf")).unwrap();
    assert_eq!(moved.model.d_model, 12);
    assert_eq!(moved.rates, rlrs_core::schedule::preset(rlrs_core::ModelKind::Moe));
    assert_eq!(json(&out.join("lr_tuning.json"))["rlrs"]["grid"].as_array().unwrap().len(), 3);
    assert!(out.join("report.json").exists());

    let dense = write_config(dir.path(), "dense.conf", &[("model.n_experts", Some("0"))]);
    let o = rlrs(&["extrapolate", "--small-result", &dense, "--large-config", &large, "--grid", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_lists_flags_and_unknown_flags_fail() {
    for (cmd, flags) in [
        ("train", &["--config", "--out", "--seed", "--data-seed"][..]),
        ("tune", &["--mode", "--budget", "--jobs"][..]),
        ("compare", &["--base", "--rlrs", "--seeds", "--jobs"][..]),
        ("extrapolate", &["--small-result", "--large-config", "--grid"][..]),
        ("ablate", &["--component", "--which", "--values", "--seeds", "--jobs"][..]),
        ("presets", &["--kind"][..]),
    ] {
        let out = rlrs(&[cmd, "--help"]);
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
        assert_eq!(rlrs(&[cmd, "--no-such-flag"]).status.code(), Some(1));
    }
}
