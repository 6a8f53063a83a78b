use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fabricgrasp::pipeline::EvalReport;

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn run(out: &Path, config: Option<&Path>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fabricgrasp"));
    cmd.arg("--out").arg(out).arg("--threads").arg("1");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = run(out, Some(&smoke_config()), args);
    assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn smoke_pipeline_produces_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["gen-objects"]);
    ok(out, &["gen-data"]);
    ok(out, &["train-encoder"]);
    ok(out, &["train-policy", "--arch", "ngf", "--encoding", "pcd"]);
    ok(out, &["train-policy", "--arch", "mlp", "--encoding", "pos"]);
    for f in ["objects.ngfp", "grasps.json", "dataset.ngfd", "encoder.json", "policy-ngf-pcd.json", "policy-mlp-pos.json"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let csv = out.join("roll.csv");
    let stdout = ok(out, &["rollout", "--shape", "capsule", "--csv", csv.to_str().unwrap()]);
    assert!(stdout.contains("ngf-pcd on capsule"));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("t,q0,"));
    assert!(text.lines().count() > 60);

    let first = out.join("a.json");
    let second = out.join("b.json");
    ok(out, &["eval", "--report", first.to_str().unwrap()]);
    ok(out, &["eval", "--report", second.to_str().unwrap()]);
    let a = std::fs::read_to_string(&first).unwrap();
    assert_eq!(a, std::fs::read_to_string(&second).unwrap());
    let report: EvalReport = serde_json::from_str(&a).unwrap();
    assert_eq!(report.report_version, 1);
    assert_eq!(report.cells.len(), 6);
    assert_eq!(report.episodes.len(), 12);
    let recount = report.recount();
    assert!(report.cells.iter().zip(&recount).all(|(c, n)| c.successes == *n));
    assert!(report.dataset_baseline.iter().all(|b| b.success_rate == 1.0));
    assert_eq!(std::fs::read_to_string(out.join("a.csv")).unwrap().lines().count(), 13);

    let only = out.join("only.json");
    ok(out, &["eval", "--trials", "0", "--policies", "mlp-pos", "--report", only.to_str().unwrap()]);
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&only).unwrap()).unwrap();
    assert_eq!(report.trials, 0);
    assert!(report.cells.iter().all(|c| c.policy == "mlp-pos" && c.trials == 0));
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(code(&run(out, Some(&out.join("absent.json")), &["gen-data"])), 2);
    let bad = out.join("bad.json");
    std::fs::write(&bad, "{\"corpus_size\": \"many\"}").unwrap();
    assert_eq!(code(&run(out, Some(&bad), &["gen-objects"])), 2);
    std::fs::write(&bad, "{\"heldout_shapes\": [\"teapot\"]}").unwrap();
    assert_eq!(code(&run(out, Some(&bad), &["gen-objects"])), 2);
    assert_eq!(code(&run(out, None, &["bogus"])), 2);
    assert_eq!(code(&run(out, None, &["train-policy", "--arch", "rnn"])), 2);
    assert_eq!(code(&run(out, None, &["eval", "--policies", "ngf"])), 2);
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let o = run(out, Some(&smoke_config()), &["train-encoder"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("gen-objects"));
    assert_eq!(code(&run(out, Some(&smoke_config()), &["eval"])), 3);
    std::fs::write(out.join("objects.ngfp"), b"NGFPgarbage").unwrap();
    assert_eq!(code(&run(out, Some(&smoke_config()), &["train-encoder"])), 3);
}

#[test]
fn diverging_training_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["gen-data"]);
    let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(smoke_config()).unwrap()).unwrap();
    cfg["train"]["optimizer"] = serde_json::json!({"kind": "momentum", "step": 1e200, "momentum": 0.9});
    let path = out.join("diverge.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let o = run(out, Some(&path), &["train-policy", "--arch", "mlp", "--encoding", "pos"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}
