use std::path::Path;
use std::process::{Command, Output};

fn e3va(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_e3va"))
        .current_dir(dir)
        .env_remove("E3VA_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn trainable_of(csv: &str) -> u64 {
    let row = csv.lines().nth(1).unwrap();
    row.split(',').nth(3).unwrap().parse().unwrap()
}

const MICRO: &[&str] = &["--model", "micro", "--method", "e3va", "--alpha", "2", "--n-images", "8", "--batch", "2"];

#[test]
fn counts_large_presets() {
    let dir = tempfile::tempdir().unwrap();
    let b = stdout(&e3va(dir.path(), &["count-params", "--model", "swin-b", "--method", "e3va", "--alpha", "8"]));
    assert!(b.starts_with("method,backbone,alpha,trainable,total,delta_vs_full_pct"));
    assert_eq!(trainable_of(&b), 1_195_008);
    let l = stdout(&e3va(dir.path(), &["count-params", "--model", "swin-l", "--alpha", "32"]));
    assert_eq!(trainable_of(&l), 6_990_336);
    let many = stdout(&e3va(dir.path(), &["count-params", "--model", "swin-b", "--methods", "full,fixed,e3va"]));
    assert_eq!(many.lines().count(), 4);
    assert!(many.lines().nth(1).unwrap().ends_with(",0.0"));
}

#[test]
fn bad_input_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let o = e3va(dir.path(), &["count-params", "--method", "prompt"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("prompt"));
    let o = e3va(dir.path(), &["train", "--model", "swin-b", "--steps", "1"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("count-params"));
    assert!(!dir.path().join("reports").exists());
}

#[test]
fn train_writes_reports_and_refuses_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let full: Vec<&str> = [&["train"][..], MICRO, &["--steps", "3", "--seed", "4"]].concat();
    stdout(&e3va(dir.path(), &full));
    let main = dir.path().join("reports/e3va-a2_4_3.csv");
    assert!(main.exists());
    assert_eq!(std::fs::read_to_string(dir.path().join("reports/e3va-a2_4_3_loss.csv")).unwrap().lines().count(), 4);
    let refused = e3va(dir.path(), &full);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("force"));
    let forced: Vec<&str> = [&full[..], &["--force"]].concat();
    assert!(stdout(&e3va(dir.path(), &forced)).contains("wrote "));
}

#[test]
fn gradcheck_on_micro_is_tight() {
    let dir = tempfile::tempdir().unwrap();
    let args: Vec<&str> = [&["gradcheck"][..], MICRO, &["--coords", "50", "--format", "json"]].concat();
    stdout(&e3va(dir.path(), &args));
    let text = std::fs::read_to_string(dir.path().join("reports/e3va-a2_7_200_gradcheck.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let groups = v["groups"].as_array().unwrap();
    assert!(!groups.is_empty());
    for g in groups {
        assert!(g["max_rel_err"].as_f64().unwrap() < 1e-4, "{g}");
    }
}

#[test]
fn compare_lists_every_requested_method() {
    let dir = tempfile::tempdir().unwrap();
    let args: Vec<&str> = [&["compare"][..], MICRO, &["--k", "5", "--parallel", "--adapter-dim", "4"]].concat();
    let out = stdout(&e3va(dir.path(), &args));
    let csv = std::fs::read_to_string(dir.path().join("reports/compare_7_200.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    for m in ["full", "fixed", "adapter-d4", "lora-d4", "e3va-a2"] {
        assert!(csv.lines().any(|l| l.starts_with(&format!("{m},"))), "{m}");
    }
    assert!(out.contains("wrote "));
}

#[test]
fn seed_from_environment_and_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    std::fs::write(
        &cfg,
        r#"{"model": "micro", "method": {"name": "fixed"}, "train": {"steps": 2, "batch": 2, "n_images": 4},
            "report": {"out_dir": "out", "format": "json"}}"#,
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_e3va"))
        .current_dir(dir.path())
        .env("E3VA_SEED", "11")
        .args(["train", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    stdout(&o);
    let text = std::fs::read_to_string(dir.path().join("out/fixed_11_2.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["seed"], 11);
    assert_eq!(v["loss_curve"].as_array().unwrap().len(), 2);
}
