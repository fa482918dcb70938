use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sevloss"));
    c.env("RUST_LOG", "warn");
    c
}

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const GOOD: &str = r#"{"question":"q","answer":"a","severity":"critical","non_critical":0.1,"neutral":0.2,"critical":0.7}"#;

#[test]
fn validate_accepts_fixtures() {
    for f in ["data/table1.jsonl", "data/table1_ar.jsonl", "data/synth_small.jsonl"] {
        let o = run(&["validate-data", repo(f).to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{f}: {}", stderr(&o));
        assert!(stdout(&o).starts_with("ok: "));
    }
}

#[test]
fn validate_reports_line_of_bad_simplex() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.jsonl");
    let bad = r#"{"question":"q","answer":"a","severity":"critical","non_critical":0.1,"neutral":0.2,"critical":0.5}"#;
    std::fs::write(&p, format!("{GOOD}\n\n{bad}\n")).unwrap();
    let o = run(&["validate-data", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.jsonl:3:"), "{}", stderr(&o));
    assert!(stderr(&o).contains("0.8"), "{}", stderr(&o));
}

#[test]
fn validate_empty_file_says_no_records() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.jsonl");
    std::fs::write(&p, "").unwrap();
    let o = run(&["validate-data", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no records"));
}

#[test]
fn missing_file_is_runtime_failure() {
    let o = run(&["validate-data", "/nonexistent/x.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        &["train"][..],
        &["stats", "x", "--weights", "heavy"],
        &["synth", "--sizes", "1,2", "--out", "x"],
        &["no-such-command"],
    ] {
        assert_eq!(run(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn stats_reports_fractions_and_weights() {
    let o = run(&["stats", repo("data/synth_small.jsonl").to_str().unwrap(), "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["class_fractions"], serde_json::json!([0.46, 0.3, 0.24]));
    let o = run(&["stats", repo("data/table1.jsonl").to_str().unwrap(), "--weights", "0.5,1,1.5"]);
    assert!(stdout(&o).contains("max 1.0200"), "{}", stdout(&o));
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for p in [&a, &b] {
        let o = run(&["synth", "--sizes", "5,4,3", "--seed", "2", "--out", p.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(std::fs::read_to_string(&a).unwrap().lines().count(), 12);
}

fn train(dir: &Path, extra: &[&str]) -> Output {
    let ckpt = dir.join("m.ckpt");
    let hist = dir.join("h.jsonl");
    let mut args: Vec<String> = vec![
        "train".into(),
        repo("configs/demo.toml").to_str().unwrap().to_string(),
        "--steps".into(),
        "5".into(),
        "--checkpoint".into(),
        ckpt.to_str().unwrap().into(),
        "--history".into(),
        hist.to_str().unwrap().into(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    bin().args(&args).output().unwrap()
}

#[test]
fn train_echoes_resolved_presets() {
    let dir = tempfile::tempdir().unwrap();
    for (name, coeffs) in [
        ("mild", ["0.75", "1.0", "1.25"]),
        ("strong", ["0.25", "1.0", "1.75"]),
        ("balanced", ["0.5", "1.0", "1.5"]),
    ] {
        let o = train(dir.path(), &["--weights", name]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let out = stdout(&o);
        assert!(out.contains(&format!("weights = \"{name}\"")));
        for (k, v) in ["alpha", "beta", "gamma"].iter().zip(coeffs) {
            assert!(out.contains(&format!("{k} = {v}\n")), "{name}: {out}");
        }
    }
    let o = train(dir.path(), &["--weights", "uniform-ce"]);
    assert!(stdout(&o).contains("weights = \"uniform-ce\""));
}

#[test]
fn train_eval_generate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let hist = std::fs::read_to_string(dir.path().join("h.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = hist.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["step"], i);
        assert!(l["loss"].as_f64().unwrap() > 0.0);
        assert!(l["mean_weight"].as_f64().is_some());
    }
    let ckpt = dir.path().join("m.ckpt");
    let o = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        repo("data/synth_small.jsonl").to_str().unwrap(),
        "--json",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let nll = r["overall"]["mean_nll"].as_f64().unwrap();
    let ppl = r["overall"]["perplexity"].as_f64().unwrap();
    assert!((ppl - nll.exp()).abs() < 1e-9);
    assert!(r["critical"]["tokens"].as_u64().unwrap() > 0);

    let o = run(&["generate", "--checkpoint", ckpt.to_str().unwrap(), "--prompt", "tumor abcd", "--max-new", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).trim_end_matches('\n').chars().count() <= 4);
}

#[test]
fn checkpoint_version_mismatch_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(train(dir.path(), &[]).status.code(), Some(0));
    let ckpt = dir.path().join("m.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
    std::fs::write(&ckpt, bytes).unwrap();
    let o = run(&["generate", "--checkpoint", ckpt.to_str().unwrap(), "--prompt", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("version 99"), "{}", stderr(&o));
}

#[test]
fn bad_config_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seed = 1\nlearning_rate = 0.1\n[data]\nsynth_sizes = [2, 2, 2]\n").unwrap();
    let o = run(&["train", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
    assert!(!dir.path().join("model.ckpt").exists());
}

#[test]
fn gradcheck_command_passes() {
    let o = run(&["gradcheck", "--trials", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains(": pass"));
    let o = run(&["gradcheck", "--trials", "1", "--tol", "1e-13"]);
    assert_eq!(o.status.code(), Some(1));
}
