use std::path::Path;
use std::process::{Command, Output};

use fd_core::config::{DatasetSource, FdConfig};
use fd_core::datasets::SyntheticSpec;

fn fd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run fd")
}

fn ok(args: &[&str]) -> String {
    let out = fd(args);
    assert!(
        out.status.success(),
        "fd {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn shrink(config: &Path, data: &Path, seed: u64) {
    let mut cfg = FdConfig::load(config).unwrap();
    cfg.dataset = DatasetSource::Synthetic {
        root: data.to_path_buf(),
        spec: SyntheticSpec {
            identities: 8,
            test_identities: 3,
            images_per_identity: 6,
            queries_per_identity: 2,
            seed,
            ..Default::default()
        },
    };
    cfg.teacher_schedule.epochs = 1;
    cfg.student_schedule.epochs = 1;
    cfg.optimizer.batch_size = 16;
    cfg.save(config).unwrap();
}

#[test]
fn views_and_presets() {
    let tmp = tempfile::tempdir().unwrap();
    let views: serde_json::Value = serde_json::from_str(&ok(&["views"])).unwrap();
    assert_eq!(views.as_array().unwrap().len(), 7);
    assert_eq!(views[4]["top"], "1/7");

    let canonical = tmp.path().join("c.toml");
    ok(&[
        "init-config",
        "--preset",
        "canonical",
        "--data",
        "/data/market",
        "--student",
        "R50b",
        "--out",
        p(&canonical),
    ]);
    let cfg = FdConfig::load(&canonical).unwrap();
    assert_eq!(cfg.student.embedding_dim, 2048);
    assert_eq!(cfg.optimizer.lr, 0.0025);
    let out = fd(&[
        "init-config",
        "--preset",
        "canonical",
        "--data",
        "x",
        "--student",
        "R7",
        "--out",
        p(&canonical),
    ]);
    assert!(!out.status.success());
}

#[test]
fn step_commands_share_one_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("desk.toml");
    let run = tmp.path().join("run");
    ok(&[
        "init-config",
        "--data",
        p(&tmp.path().join("data")),
        "--out",
        p(&config),
    ]);
    shrink(&config, &tmp.path().join("data"), 7);

    let line = ok(&[
        "generate-synthetic",
        "--config",
        p(&config),
        "--out",
        p(&tmp.path().join("render")),
    ]);
    assert!(line.starts_with("30 train / 6 query"), "{line}");

    ok(&["train-teachers", "--config", p(&config), "--out", p(&run)]);
    assert!(run.join("teachers").join("Dn2").join("manifest.json").exists());

    let standalone = tmp.path().join("sr");
    let stats: serde_json::Value = serde_json::from_str(&ok(&[
        "build-sr",
        "--config",
        p(&config),
        "--teachers",
        p(&run.join("teachers")),
        "--out",
        p(&standalone),
    ]))
    .unwrap();
    assert_eq!(stats["written"], 7 * 30);
    assert!(standalone.join("sr_Holistic.bin").exists());

    ok(&["train-student", "--config", p(&config), "--out", p(&run)]);
    let report: serde_json::Value =
        serde_json::from_str(&ok(&["run-all", "--config", p(&config), "--out", p(&run)])).unwrap();
    assert_eq!(
        report["skipped"],
        serde_json::json!(["teachers", "sr_cache", "student"])
    );
    assert!(report["student"]["rank1"].is_number());
    assert!(run.join("manifest.json").exists());

    let json = tmp.path().join("init.json");
    let text = ok(&[
        "evaluate",
        "--config",
        p(&config),
        "--run",
        p(&run),
        "--model",
        "initial-student",
        "--out",
        p(&json),
    ]);
    assert!(text.contains("Rank-1"), "{text}");
    let saved: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(saved["model"], "initial_student");

    // Direct transfer onto a differently seeded dataset.
    let other = tmp.path().join("other.toml");
    ok(&[
        "init-config",
        "--data",
        p(&tmp.path().join("other")),
        "--out",
        p(&other),
    ]);
    shrink(&other, &tmp.path().join("other"), 8);
    ok(&[
        "generate-synthetic",
        "--config",
        p(&other),
        "--out",
        p(&tmp.path().join("other")),
    ]);
    let text = ok(&[
        "evaluate",
        "--config",
        p(&config),
        "--run",
        p(&run),
        "--transfer-to",
        p(&tmp.path().join("other")),
    ]);
    assert!(text.contains("CrossDataset"), "{text}");

    let overlays = tmp.path().join("att");
    ok(&[
        "attention",
        "--config",
        p(&config),
        "--run",
        p(&run),
        "--count",
        "2",
        "--out",
        p(&overlays),
    ]);
    assert_eq!(std::fs::read_dir(&overlays).unwrap().count(), 2 * (2 + 7));

    let mut changed = FdConfig::load(&config).unwrap();
    changed.loss.beta = 0.5;
    changed.save(&config).unwrap();
    let out = fd(&["run-all", "--config", p(&config), "--out", p(&run)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    assert!(!fd(&["run-all", "--config", "/nonexistent.toml", "--out", "/tmp/x"])
        .status
        .success());
    let out = Command::new(env!("CARGO_BIN_EXE_fd"))
        .arg("views")
        .env("FD_WORKERS", "many")
        .output()
        .unwrap();
    assert!(!out.status.success());
}
