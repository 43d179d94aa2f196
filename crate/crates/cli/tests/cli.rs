use std::path::Path;
use std::process::{Command, Output};

fn flagcns(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flagcns"))
        .args(args)
        .env_remove("FLAGCNS_TRANSPORT")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON report")
}

const SMALL: &[&str] = &[
    "--synthetic",
    "3",
    "--population",
    "6",
    "--layers",
    "2",
    "--generations",
    "2",
    "--weight-steps",
    "2",
    "--retrain-epochs",
    "10",
    "--timing-runs",
    "1",
    "--seed",
    "4",
];

fn with(cmd: &str, extra: &[&str]) -> Vec<String> {
    std::iter::once(cmd)
        .chain(SMALL.iter().copied())
        .chain(extra.iter().copied())
        .map(String::from)
        .collect()
}

fn run(args: &[String]) -> Output {
    flagcns(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn flacc_prints_the_weighted_mean() {
    let out = flagcns(&["flacc", "--acc", "0.8,0.7", "--sizes", "1000,1000"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "0.75");
    let out = flagcns(&["flacc", "--acc", "0.8", "--sizes", "1,2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_and_data_errors_exit_with_two() {
    let out = run(&with("search", &["--population", "0"]));
    assert_eq!(out.status.code(), Some(2));
    let out = flagcns(&["search", "--dataset", "/nonexistent/bundle", "--generations", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&with("train", &["--baseline", "resnet"]));
    assert_eq!(out.status.code(), Some(2));
    let out = run(&with("train", &["--epochs", "0"]));
    assert_eq!(out.status.code(), Some(2));
    let out = run(&with("ablation", &[]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn search_writes_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = run(&with("search", &["--out", out_dir.to_str().unwrap(), "--record-transcript"]));
    let json = stdout_json(&out);
    for f in ["run.json", "generations.jsonl", "generations.csv", "transcript.jsonl"] {
        assert!(out_dir.join(f).is_file(), "missing {f}");
    }
    let on_disk: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(on_disk, json);
    assert_eq!(std::fs::read_to_string(out_dir.join("generations.jsonl")).unwrap().lines().count(), 2);
    assert_eq!(std::fs::read_to_string(out_dir.join("generations.csv")).unwrap().lines().count(), 3);
    let flacc = json["flacc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&flacc));

    // the emitted config reproduces the run
    let cfg_path = dir.path().join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string(&json["config"]).unwrap()).unwrap();
    let again = stdout_json(&flagcns(&["search", "--config", cfg_path.to_str().unwrap(), "--timing-runs", "1"]));
    assert_eq!(again["best_code"], json["best_code"]);
    assert_eq!(again["fll_trajectory"], json["fll_trajectory"]);
}

#[test]
fn train_accepts_text_architectures() {
    let json = stdout_json(&run(&with(
        "train",
        &["--arch", "IS4 | L1:gcn<-0 L2:gcn<-1 | OS4", "--epochs", "5"],
    )));
    assert_eq!(json["best_code_text"], "IS4 | L1:gcn<-0 L2:gcn<-1 | OS4");
    assert_eq!(json["command"], "train");
}

#[test]
fn baseline_and_ablation_run() {
    let json = stdout_json(&run(&with("baseline", &["--budget", "3", "--baseline-epochs", "2"])));
    assert_eq!(json["candidate_evaluations"], 3);
    assert_eq!(json["fll_trajectory"].as_array().unwrap().len(), 3);
    let json = stdout_json(&run(&with("ablation", &["--controller-only"])));
    assert_eq!(json["command"], "ablation");
}

#[test]
fn partition_writes_client_bundles() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&with("partition", &["--out", dir.path().to_str().unwrap()]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["clients"], 3);
    for c in 0..3 {
        assert!(Path::new(&dir.path().join(format!("client_{c}"))).join("meta.json").is_file());
    }
    assert!(dir.path().join("partition.json").is_file());
}

#[test]
fn socket_transport_matches_inproc() {
    let dir = tempfile::tempdir().unwrap();
    let inproc = stdout_json(&run(&with("search", &[])));
    let socket = stdout_json(&run(&with(
        "search",
        &["--transport", "socket", "--out", dir.path().to_str().unwrap()],
    )));
    assert_eq!(socket["best_code"], inproc["best_code"]);
    assert_eq!(socket["fll_trajectory"], inproc["fll_trajectory"]);
    assert_eq!(socket["final_fll"], inproc["final_fll"]);
}
