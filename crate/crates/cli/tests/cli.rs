//! End-to-end runs of the `slm-lab` binary on tiny synthetic inputs.

use std::path::Path;
use std::process::{Command, Output};

const TINY_MODEL: &str = r#"
[model]
d_model = 16
n_layers = 1
n_heads = 2
seq_len = 16

[train]
batch_rows = 8
total_tokens = 2048
peak_lr = 3e-3
checkpoint_every_tokens = 512

[reference]
epochs = 1
"#;

fn slm_lab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slm-lab"))
        .current_dir(dir)
        .env_remove("SLM_LAB_OUT_DIR")
        .args(["--log-every", "0"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = slm_lab(dir, args);
    assert!(
        out.status.success(),
        "slm-lab {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth_inputs(dir: &Path) {
    ok(dir, &["synth", "--clean-fraction", "0.7", "--tokens", "6000", "--seed", "1", "--out", "train.rhot"]);
    ok(dir, &["synth", "--clean-fraction", "1.0", "--tokens", "3000", "--seed", "2", "--out", "clean.rhot"]);
    ok(dir, &["synth", "--clean-fraction", "1.0", "--tokens", "1000", "--seed", "3", "--out", "val.rhot"]);
    std::fs::write(dir.join("model.toml"), TINY_MODEL).unwrap();
}

#[test]
fn staged_commands_chain_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_inputs(dir);

    ok(dir, &["train-ref", "--config", "model.toml", "--clean", "clean.rhot", "--validation", "val.rhot", "--out-dir", "ref"]);
    assert!(dir.join("ref/final.rhoc").exists());

    ok(dir, &["score", "--ref", "ref/final.rhoc", "--stream", "train.rhot", "--out", "train.rhos"]);
    ok(dir, &[
        "train", "--config", "model.toml", "--stream", "train.rhot", "--scores", "train.rhos",
        "--objective", "slm", "--select-ratio", "0.6", "--validation", "val.rhot", "--out-dir", "slm",
    ]);
    for f in ["final.rhoc", "train_log.tsv", "checkpoints.tsv"] {
        assert!(dir.join("slm").join(f).exists(), "missing {f}");
    }

    let summary = ok(dir, &["eval-dynamics", "--checkpoints", "slm", "--stream", "val.rhot", "--max-tokens", "200", "--out", "dyn.tsv"]);
    assert!(summary.starts_with("category\tcount\tfraction"));
    assert_eq!(summary.lines().count(), 5);
    assert!(dir.join("dyn.tsv.summary.tsv").exists());

    ok(dir, &["analyze", "curves", "--run", "slm", "--out", "curves.tsv"]);
    let curves = std::fs::read_to_string(dir.join("curves.tsv")).unwrap();
    assert!(curves.lines().count() > 1);

    let sel = ["--checkpoints", "slm", "--stream", "train.rhot", "--scores", "train.rhos", "--batch-rows", "8"];
    let ppl = ok(dir, &[&["analyze", "ckpt-ppl"][..], &sel, &["--out", "ppl.tsv"]].concat());
    assert!(ppl.starts_with("selected_by"));
    let fractions = ok(dir, &[&["analyze", "report"][..], &sel].concat());
    assert!(fractions.starts_with("tokens_seen\tselected\tclean_fraction"));
    ok(dir, &[&["report"][..], &sel, &["--out", "sel.html"]].concat());
    let html = std::fs::read_to_string(dir.join("sel.html")).unwrap();
    assert!(html.contains("<section>") && html.contains("data-i=\"1\""));
}

#[test]
fn clm_training_needs_no_scores_and_curves_refuse_it() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_inputs(dir);
    ok(dir, &["train", "--config", "model.toml", "--stream", "train.rhot", "--objective", "clm", "--out-dir", "clm"]);
    let out = slm_lab(dir, &["analyze", "curves", "--run", "clm", "--out", "c.tsv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage `analyze`"));
}

#[test]
fn slm_training_without_scores_fails_before_compute() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_inputs(dir);
    let out = slm_lab(dir, &["train", "--config", "model.toml", "--stream", "train.rhot", "--out-dir", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage `train`"));
    assert!(!dir.join("x").exists());
}

#[test]
fn scores_for_another_stream_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_inputs(dir);
    ok(dir, &["train-ref", "--config", "model.toml", "--clean", "clean.rhot", "--epochs", "0", "--out-dir", "ref"]);
    ok(dir, &["score", "--ref", "ref/final.rhoc", "--stream", "clean.rhot", "--out", "clean.rhos"]);
    let out = slm_lab(dir, &[
        "train", "--config", "model.toml", "--stream", "train.rhot", "--scores", "clean.rhos", "--out-dir", "x",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("provenance mismatch"));
}

fn pipeline_config(dir: &Path, extra_paths: &str) {
    let text = format!(
        "{TINY_MODEL}\n[paths]\nstream = \"train.rhot\"\nvalidation_stream = \"val.rhot\"\nout_dir = \"run\"\n{extra_paths}"
    );
    std::fs::write(dir.join("run.toml"), text).unwrap();
}

#[test]
fn pipeline_writes_a_manifest_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_inputs(dir);
    pipeline_config(dir, "reference_stream = \"clean.rhot\"\n");
    ok(dir, &["pipeline", "--config", "run.toml"]);
    let first = std::fs::read(dir.join("run/manifest.json")).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    for needle in ["\"reference\"", "\"scoring\"", "\"train\"", "reference/final.rhoc", "scores.rhos", "train/final.rhoc"] {
        assert!(text.contains(needle), "manifest lacks {needle}");
    }

    let out = Command::new(env!("CARGO_BIN_EXE_slm-lab"))
        .current_dir(dir)
        .env("SLM_LAB_OUT_DIR", dir.join("run2"))
        .args(["--log-every", "0", "pipeline", "--config", "run.toml"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read(dir.join("run2/manifest.json")).unwrap(), first);
}

#[test]
fn pipeline_failures_name_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_inputs(dir);

    pipeline_config(dir, "");
    let out = slm_lab(dir, &["pipeline", "--config", "run.toml"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage `config`") && err.contains("slm"), "{err}");

    std::fs::write(dir.join("broken.rhot"), b"RHOT").unwrap();
    pipeline_config(dir, "reference_stream = \"broken.rhot\"\n");
    let out = slm_lab(dir, &["pipeline", "--config", "run.toml"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage `reference`"), "{err}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("run.toml"), "[train]\nselect_ration = 0.5\n").unwrap();
    let out = slm_lab(dir, &["pipeline", "--config", "run.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("select_ration"));
}

#[test]
fn tokenize_and_powerlaw_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("a.txt"), "first paragraph\n\nsecond one\n").unwrap();
    let msg = ok(dir, &["tokenize", "--in", "a.txt", "--split-paragraphs", "--out", "a.rhot"]);
    assert!(msg.starts_with("29 tokens"), "{msg}");

    let mut pts = String::from("loss\tmetric\n");
    for i in 0..9 {
        let l = 1.0 + 0.25 * i as f64;
        pts.push_str(&format!("{l}\t{}\n", (-2.0 * l + 9.0f64).ln()));
    }
    std::fs::write(dir.join("pts.tsv"), pts).unwrap();
    let fit = ok(dir, &["analyze", "powerlaw", "--points", "pts.tsv"]);
    let vals: Vec<f64> = fit.lines().nth(1).unwrap().split('\t').map(|v| v.parse().unwrap()).collect();
    assert!((vals[0] + 2.0).abs() < 1e-6 && (vals[1] - 9.0).abs() < 1e-6, "{fit}");
}
