use std::path::Path;
use std::process::{Command, Output};

fn matnet(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_matnet"))
        .env("MATNET_OUT", out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gen_data_then_evaluate_writes_artifacts_to_env_dir() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("blobs.csv");
    ok(&matnet(dir.path(), &["gen-data", "--output", data.to_str().unwrap(), "--samples", "600"]));
    let text = ok(&matnet(dir.path(), &["evaluate", "--data", data.to_str().unwrap(), "--epochs", "60"]));
    assert!(text.contains("macro-F1"), "{text}");
    for f in ["model.json", "program.json", "report.json", "resources.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }

    let json = ok(&matnet(dir.path(), &["report", "--json"]));
    let report: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(report["samples"].as_u64(), Some(90));

    let decisions = ok(&matnet(dir.path(), &["simulate", "--input", data.to_str().unwrap(), "--output", "-"]));
    assert_eq!(decisions.lines().count(), 600);
    let first: serde_json::Value = serde_json::from_str(decisions.lines().next().unwrap()).unwrap();
    assert!(first["decision"].is_u64(), "{first}");
}

#[test]
fn toml_config_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "model = \"zoo:mlp_b\"\nseed = 3\n[data]\nsamples = 500\n[train]\nepochs = 40\n").unwrap();
    let text = ok(&matnet(dir.path(), &["compile", "--config", cfg.to_str().unwrap(), "--depth", "3"]));
    assert!(text.contains("stage"), "{text}");
    let dsl = std::fs::read_to_string(dir.path().join("model.dsl")).unwrap();
    assert!(dsl.contains("depth 3"), "{dsl}");
    assert!(dir.path().join("program.json").exists());
}

#[test]
fn stage_shortage_is_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = matnet(dir.path(), &["compile", "--samples", "300", "--epochs", "10", "--stages", "1"]);
    assert!(!o.status.success());
    let err: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&o.stderr).trim()).unwrap();
    assert_eq!(err["error"]["kind"], "insufficient_stages");
    assert!(err["error"]["phases"].as_array().unwrap().iter().any(|p| p == "schedule"), "{err}");
}

#[test]
fn unknown_zoo_model_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = matnet(dir.path(), &["fit", "--model", "zoo:nope"]);
    assert!(!o.status.success());
    let err: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&o.stderr).trim()).unwrap();
    assert!(err["error"]["message"].as_str().unwrap().contains("nope"), "{err}");
}
