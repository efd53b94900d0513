use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"{
  "seed": 7,
  "corpus": "c.txt",
  "model_config": {"d_model": 16, "n_layers": 2, "n_heads": 2, "d_ff": 32, "context_len": 32},
  "train": {"epochs": 1, "batch": 8, "block": 32},
  "splits": {"calib_tokens": 2048, "monitor_tokens": 1024},
  "distill": {"steps": 10, "batch": 4, "block": 32, "eval_every": 5}
}"#;

fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let hamlet = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/hamlet.txt");
    let text = std::fs::read(hamlet).unwrap();
    std::fs::write(dir.path().join("c.txt"), &text[..60_000]).unwrap();
    std::fs::write(dir.path().join("cfg.json"), TINY).unwrap();
    dir
}

fn spon(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spon"))
        .current_dir(dir)
        .env_remove("SPON_SEED")
        .args(["--config", "cfg.json", "--out-dir", "o"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = spon(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join("o").join(name)).unwrap()
}

fn pipeline(dir: &Path) {
    ok(dir, &["train"]);
    ok(dir, &["calibrate-sparsity", "--model", "o/model.spon", "--target", "0.5"]);
    ok(dir, &["calibrate-spon", "--model", "o/model.spon", "--profile", "o/profile.json"]);
}

fn ppl_of(summary: &str) -> &str {
    summary.split_whitespace().find_map(|w| w.strip_prefix("ppl=")).unwrap()
}

#[test]
fn missing_corpus_exits_2() {
    let dir = workspace();
    let out = spon(dir.path(), &["train", "--corpus", "nope.txt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corpus not found"));
}

#[test]
fn missing_seed_exits_2() {
    let dir = workspace();
    std::fs::write(dir.path().join("cfg.json"), r#"{"corpus": "c.txt"}"#).unwrap();
    let out = spon(dir.path(), &["theory-demo"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn zero_epochs_writes_the_initial_model() {
    let dir = workspace();
    let stdout = ok(dir.path(), &["train", "--epochs", "0"]);
    assert!(stdout.contains("after 0 steps"), "{stdout}");
    assert!(dir.path().join("o/model.spon").exists());
}

#[test]
fn runs_are_byte_identical() {
    let a = workspace();
    let b = workspace();
    pipeline(a.path());
    pipeline(b.path());
    for name in ["model.spon", "train_report.json", "profile.json", "params.json"] {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name} differs");
    }
}

#[test]
fn folded_model_evaluates_like_the_unfolded_one() {
    let dir = workspace();
    let d = dir.path();
    pipeline(d);
    ok(d, &["fold", "--model", "o/model.spon", "--params", "o/params.json"]);
    let unfolded = ok(d, &["eval", "--model", "o/model.spon", "--profile", "o/profile.json", "--params", "o/params.json"]);
    let folded = ok(
        d,
        &[
            "eval",
            "--model",
            "o/model_folded.spon",
            "--profile",
            "o/profile.json",
            "--params",
            "o/params_folded.json",
            "--dense",
            "o/model.spon",
        ],
    );
    let (u, f): (f64, f64) = (ppl_of(&unfolded).parse().unwrap(), ppl_of(&folded).parse().unwrap());
    assert!((u - f).abs() / u < 1e-5, "{unfolded} vs {folded}");

    let out = spon(d, &["fold", "--model", "o/model_folded.spon", "--params", "o/params_folded.json"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn experiment_commands_write_artifacts() {
    let dir = workspace();
    let d = dir.path();
    pipeline(d);
    let common = ["--model", "o/model.spon", "--profile", "o/profile.json"];
    ok(d, &[&["repr-shift", "--params", "o/params.json", "--prompts", "5"][..], &common].concat());
    ok(d, &[&["ablate-sites", "--sets", "down"][..], &common, &["--steps", "2"]].concat());
    let csv = String::from_utf8(read(d, "ablate_sites.csv")).unwrap();
    assert!(csv.starts_with("kind,label,layer,sites,"));
    assert_eq!(csv.lines().count(), 2);
    let pca = String::from_utf8(read(d, "repr_pca.csv")).unwrap();
    assert!(pca.starts_with("mode,prompt,position,pc1,pc2"));
    let shift: serde_json::Value = serde_json::from_slice(&read(d, "repr_shift.json")).unwrap();
    assert!(shift["spon"]["mean_l2"].as_f64().is_some());
}

#[test]
fn theory_demo_reports_inclusion() {
    let dir = workspace();
    let stdout = ok(dir.path(), &["theory-demo", "--m", "4", "--m-prime", "3"]);
    assert!(stdout.contains("embed_ok=true"), "{stdout}");
    let report: serde_json::Value = serde_json::from_slice(&read(dir.path(), "theory.json")).unwrap();
    assert_eq!(report["K"], 8);
    assert_eq!(report["piece_count"], 5);
    assert!(report["struct_linf_error"].as_f64().unwrap() > 0.0);
}

#[test]
fn schema_mismatch_exits_3() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["train", "--epochs", "0"]);
    ok(d, &["calibrate-sparsity", "--model", "o/model.spon"]);
    let path: PathBuf = d.join("o/profile.json");
    let text = std::fs::read_to_string(&path).unwrap().replacen("\"schema_version\": 1", "\"schema_version\": 99", 1);
    std::fs::write(&path, text).unwrap();
    let out = spon(d, &["eval", "--model", "o/model.spon", "--profile", "o/profile.json"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn corrupt_model_exits_3() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["train", "--epochs", "0"]);
    let path = d.join("o/model.spon");
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 10] ^= 0xff;
    std::fs::write(&path, bytes).unwrap();
    let out = spon(d, &["eval", "--model", "o/model.spon"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn divergence_exits_4_with_diagnostics() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["train"]);
    ok(d, &["calibrate-sparsity", "--model", "o/model.spon"]);
    let out = spon(d, &["calibrate-spon", "--model", "o/model.spon", "--profile", "o/profile.json", "--lr", "1e38"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let diag: serde_json::Value = serde_json::from_slice(&read(d, "diagnostics.json")).unwrap();
    assert!(diag["error"].as_str().unwrap().contains("diverged"));
    assert!(!d.join("o/params.json").exists());
}
