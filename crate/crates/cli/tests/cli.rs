use std::path::Path;
use std::process::Command;

const SMOKE: &str = r#"
seed = 3
[field]
grid_size = 8
[model]
coarse_grid = 2
[data]
labeled = 8
virtual = 4
virtual_type = "hybrid"
randomized_count = 10
validation = 16
[train]
iterations = 500
log_every = 100
[eval]
samples = 16
[eval.infer]
mode = "optimize"
iterations = 200
learning_rate = 0.01
mc_samples = 2
"#;

fn cgsur(args: &[&str], config: &Path, out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cgsur"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(["--workers", "1"])
        .output()
        .unwrap()
}

#[test]
fn smoke_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("smoke.toml");
    std::fs::write(&config, SMOKE).unwrap();
    let out = dir.path().join("out");

    let start = std::time::Instant::now();
    for cmd in [&["gen"][..], &["train"], &["eval"]] {
        let o = cgsur(cmd, &config, &out);
        assert!(o.status.success(), "{cmd:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(start.elapsed().as_secs() < 60);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["N_v"], 16);
    assert_eq!(report["K"], 16);
    assert_eq!(report["fine_solves"], 0);
    assert!(report["R2"].as_f64().unwrap() > 0.5);
    assert!(report["config_hash"].is_string());

    let o = cgsur(&["uq", "--quick"], &config, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let n = std::fs::read_to_string(out.join("uq_surrogate.csv")).unwrap().lines().count();
    assert_eq!(n, 1025);

    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    for f in ["checkpoint.bin", "train_log.csv", "eval_report.json", "data/labeled_x.f64", "uq_density.csv"] {
        assert!(manifest["files"][f]["sha256"].is_string(), "{f} missing from manifest");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\ncoarse_grid = 3\n").unwrap();
    assert_eq!(cgsur(&["gen"], &bad, &out).status.code(), Some(2));
    assert_eq!(cgsur(&["gen"], &dir.path().join("absent.toml"), &out).status.code(), Some(2));

    // A changed config must not silently reuse data generated under another one.
    let config = dir.path().join("smoke.toml");
    std::fs::write(&config, SMOKE).unwrap();
    assert!(cgsur(&["gen"], &config, &out).status.success());
    let changed = dir.path().join("changed.toml");
    std::fs::write(&changed, SMOKE.replace("labeled = 8", "labeled = 9")).unwrap();
    assert_eq!(cgsur(&["train"], &changed, &out).status.code(), Some(2));

    // Far too large a step makes the optimization blow up.
    let wild = dir.path().join("wild.toml");
    std::fs::write(&wild, SMOKE.replace("log_every = 100", "log_every = 100\nlocal_learning_rate = 1e12\n[train.adam]\nlearning_rate = 1e12")).unwrap();
    let o = cgsur(&["train"], &wild, &out);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
