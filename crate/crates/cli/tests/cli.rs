//! End-to-end checks of the binary: subcommands, exit codes, and the
//! compare gate.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hijacklab"))
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn validate_accepts_bundled_configs() {
    for name in ["attack.json", "jl_check.json", "compress.json"] {
        let out = bin()
            .args(["validate"])
            .arg(configs_dir().join(name))
            .output()
            .unwrap();
        assert!(out.status.success(), "{name}: {out:?}");
    }
}

#[test]
fn validate_rejects_bad_config_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        r#"{
            "dataset": { "generator": { "type": "dual_blobs", "n_orig": 4, "m_hijack": 4,
                "dim": 4, "n_per_cell": 2, "orig_sep": 1.0, "hijack_sep": 1.0, "noise_sigma": 0.1 } },
            "split": { "train_fraction": 1.5 },
            "model": { "hidden": [8] },
            "train": { "epochs": 1, "batch_size": 1, "learning_rate": 0.1 },
            "attack": { "metric": "l3" },
            "study": { "type": "attack" }
        }"#,
    )
    .unwrap();
    let out = bin().args(["validate"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("attack.metric"), "stderr: {stderr}");
    assert!(stderr.contains("split.train_fraction"), "stderr: {stderr}");
}

#[test]
fn run_then_compare_is_clean_and_diffs_gate() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let config_before = std::fs::read(configs_dir().join("attack.json")).unwrap();
    for out_dir in [&out_a, &out_b] {
        let out = bin()
            .args(["run"])
            .arg(configs_dir().join("attack.json"))
            .arg("--output")
            .arg(out_dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "{out:?}");
    }
    // runs never mutate their input files
    assert_eq!(
        std::fs::read(configs_dir().join("attack.json")).unwrap(),
        config_before
    );
    let report_a = out_a.join("report.json");
    let report_b = out_b.join("report.json");
    assert!(out_a.join("features.csv").exists(), "feature export missing");

    let out = bin()
        .args(["compare"])
        .arg(&report_a)
        .arg(&report_b)
        .output()
        .unwrap();
    assert!(out.status.success(), "identical runs must compare clean: {out:?}");

    // perturb one number beyond the tolerance: the gate exits 1
    let text = std::fs::read_to_string(&report_b).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["payload"]["attack"]["attack"]["top_n"][0] = serde_json::json!(0.999);
    let tampered = dir.path().join("tampered.json");
    std::fs::write(&tampered, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    let out = bin()
        .args(["compare", "--tolerance", "0.01"])
        .arg(&report_a)
        .arg(&tampered)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("top_n[0]"), "stdout: {stdout}");
}

#[test]
fn compare_refuses_mismatched_studies_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    bin()
        .args(["run"])
        .arg(configs_dir().join("attack.json"))
        .arg("--output")
        .arg(&out_a)
        .output()
        .unwrap();
    bin()
        .args(["run"])
        .arg(configs_dir().join("jl_check.json"))
        .arg("--output")
        .arg(&out_b)
        .output()
        .unwrap();
    let out = bin()
        .args(["compare"])
        .arg(out_a.join("report.json"))
        .arg(out_b.join("report.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_file_exits_5() {
    let out = bin().args(["run", "/nonexistent/config.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn demo_regenerates_every_bundled_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["demo", "--configs"])
        .arg(configs_dir())
        .arg("--output")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{out:?}");
    let mut count = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let name = path.file_stem().unwrap().to_string_lossy().into_owned();
            assert!(
                dir.path().join(&name).join("report.json").exists(),
                "missing report for {name}"
            );
            count += 1;
        }
    }
    assert_eq!(count, 8, "expected the eight bundled studies");
}
