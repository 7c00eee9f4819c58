use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/scenarios").join(name)
}

fn cars(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cars"))
        .arg("--config")
        .arg(config("ellipse.toml"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = cars(dir.path(), &["eval", "--policy", "agent", "--checkpoint", "/definitely/missing.ckpt", "--value", "/also/missing.bin"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing"));
    assert_eq!(cars(dir.path(), &["train", "--method", "teleport"]).status.code(), Some(2));
    assert_eq!(cars(dir.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(cars(dir.path(), &["solve-grid", "--gamma", "0.5", "--coarse"]).status.code(), Some(2));
}

#[test]
fn pipeline_runs_end_to_end_and_reports_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let s = |p: &str| out.join(p).to_str().unwrap().to_string();

    ok(&cars(out, &["solve-grid", "--coarse"]));
    ok(&cars(out, &["gen-data", "--episodes", "40"]));
    ok(&cars(out, &["fit-reach", "--epochs", "2", "--hidden", "16,16"]));
    let check = cars(out, &["eval", "--policy", "oracle-check"]);
    ok(&check);
    let v: serde_json::Value = serde_json::from_slice(&check.stdout).unwrap();
    assert!(v["agreement"].as_f64().unwrap() >= 0.0);

    ok(&cars(out, &["train", "--method", "proposed", "--episodes", "3", "--checkpoint-every", "2"]));
    let ckpt = s("proposed-seed7.ckpt");
    assert!(Path::new(&ckpt).exists());
    // Resuming to a longer run continues from the checkpoint.
    ok(&cars(out, &["train", "--method", "proposed", "--episodes", "4", "--resume", &ckpt]));
    let lines = std::fs::read_to_string(out.join("proposed-seed7.train.ndjson")).unwrap();
    assert_eq!(lines.lines().count(), 4);

    ok(&cars(out, &["eval", "--policy", "agent", "--checkpoint", &ckpt, "--episodes", "3", "--timing"]));
    ok(&cars(out, &["eval", "--policy", "driver-only", "--episodes", "3", "--sequential"]));
    let logs = format!("{},{}", s("proposed.episodes.ndjson"), s("driver-only.episodes.ndjson"));
    ok(&cars(&out.join("r1"), &["report", "--logs", &logs, "--value", &s("grid.bin")]));
    ok(&cars(&out.join("r2"), &["report", "--logs", &logs, "--value", &s("grid.bin")]));
    for f in ["metrics.csv", "trajectories.png", "value_slice.png"] {
        assert_eq!(std::fs::read(out.join("r1").join(f)).unwrap(), std::fs::read(out.join("r2").join(f)).unwrap(), "{f}");
    }
    let csv = std::fs::read_to_string(out.join("r1/metrics.csv")).unwrap();
    assert!(csv.contains("\nproposed,3,") && csv.contains("\ndriver-only,3,"));

    ok(&cars(out, &["sweep", "--checkpoint", &ckpt, "--k-lambda", "1", "--t-m", "0.3,0.75", "--episodes", "2"]));
    let sweep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(sweep["cells"].as_array().unwrap().len(), 2);
}
