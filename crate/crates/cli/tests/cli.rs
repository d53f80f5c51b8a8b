use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ragfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ragfuse"))
        .args(args)
        .env("RAGFUSE_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = ragfuse(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn err_line(args: &[&str]) -> String {
    let out = ragfuse(args);
    assert!(!out.status.success(), "{args:?} should fail");
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    stderr.trim_end().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

const SMALL_SYNTH: &[&str] = &[
    "--set",
    "num_nodes=240",
    "--set",
    "fraud_fraction=0.3",
    "--set",
    "feature_dim=6",
    "--set",
    "feature_separation=2",
];

const SMALL_TRAIN: &[&str] = &[
    "--set",
    "epochs=2",
    "--set",
    "d=8",
    "--set",
    "heads=2",
    "--set",
    "batch_size=32",
    "--set",
    "probe_size=32",
];

fn synth(dir: &Path) {
    let mut args = vec!["synth", "--out", s(dir)];
    args.extend_from_slice(SMALL_SYNTH);
    ok(&args);
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", s(data), "--out", s(out)];
    args.extend_from_slice(SMALL_TRAIN);
    args.extend_from_slice(extra);
    ragfuse(&args)
}

#[test]
fn synth_then_train_writes_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("d"), tmp.path().join("r"));
    synth(&data);
    assert!(data.join("manifest.json").exists());
    assert!(data.join("generator.json").exists());
    assert!(train(&data, &run, &[]).status.success());
    for f in ["manifest.json", "epochs.csv", "best.ckpt", "metrics.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let m = read_json(&run.join("manifest.json"));
    assert_eq!(m["status"], "complete");
    let outputs: Vec<&str> = m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(outputs, ["epochs.csv", "best.ckpt", "metrics.json"]);
    assert_eq!(m["config"]["epochs"], 2);
    assert_eq!(m["dataset_checksums"].as_object().unwrap().len(), 5);
    assert_eq!(m["notes"]["early_stopping"], "validation AUC, patience 20");
    let csv = std::fs::read_to_string(run.join("epochs.csv")).unwrap();
    assert!(csv.starts_with("epoch,loss,val_auc,val_ap,val_f1,test_auc,test_ap,test_f1,cos_sim,cka,seconds\n"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn completed_runs_are_not_overwritten() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("d"), tmp.path().join("r"));
    synth(&data);
    assert!(train(&data, &run, &[]).status.success());
    let before = std::fs::read(run.join("best.ckpt")).unwrap();
    let out = train(&data, &run, &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[exists]"));
    // a resumed completed run is a no-op, even with a different config
    assert!(train(&data, &run, &["--resume", "--set", "epochs=3"]).status.success());
    assert_eq!(std::fs::read(run.join("best.ckpt")).unwrap(), before);
    let mut args = vec!["synth", "--out", s(&data)];
    args.extend_from_slice(SMALL_SYNTH);
    assert!(err_line(&args).starts_with("error[exists]"));
}

#[test]
fn identical_invocations_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    synth(&data);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(train(&data, &a, &["--seed", "4"]).status.success());
    assert!(train(&data, &b, &["--seed", "4"]).status.success());
    for f in ["epochs.csv", "best.ckpt", "metrics.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let ckpt = a.join("best.ckpt");
    let e1 = ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data)]).stdout;
    let e2 = ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data)]).stdout;
    assert_eq!(e1, e2);
    let report: Value = serde_json::from_slice(&e1).unwrap();
    let metrics = read_json(&a.join("metrics.json"));
    assert_eq!(report["test"], metrics["test"]);
}

#[test]
fn failed_run_is_marked_and_cleaned() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("d"), tmp.path().join("r"));
    synth(&data);
    let out = train(&data, &run, &["--set", "train_ratio=0.95"]);
    assert!(!out.status.success());
    let m = read_json(&run.join("manifest.json"));
    assert_eq!(m["status"], "failed");
    assert!(m["notes"]["error"].as_str().unwrap().starts_with("invalid_argument"));
    assert!(!run.join("epochs.csv").exists());
    // an incomplete run needs --resume
    assert!(train(&data, &run, &[]).status.code() != Some(0));
    assert!(train(&data, &run, &["--resume"]).status.success());
    assert_eq!(read_json(&run.join("manifest.json"))["status"], "complete");
}

#[test]
fn bad_input_gives_one_line_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    synth(&data);
    let run = tmp.path().join("r");
    let line = err_line(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--set",
        "learning_rate=0.1",
    ]);
    assert!(line.starts_with("error[usage]: unknown config key"), "{line}");
    assert!(!run.exists(), "nothing written before validation");
    let line = err_line(&["train", "--data", s(&tmp.path().join("missing")), "--out", s(&run)]);
    assert!(line.starts_with("error[io]"), "{line}");
    let line = err_line(&["train", "--out", s(&run)]);
    assert_eq!(line, "error[usage]: --data is required");
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"epochs": 1, "dropuot": 0.2}"#).unwrap();
    let line = err_line(&["params", "--config", s(&cfg)]);
    assert!(line.starts_with("error[json]") && line.contains("dropuot"), "{line}");
    let line = err_line(&[
        "sweep",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--axis",
        "d",
        "--values",
        "8,7",
    ]);
    assert!(line.starts_with("error[invalid_argument]"), "{line}");
}

#[test]
fn params_topology_much_smaller_than_semantic() {
    let out = ok(&["params"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let c = &v["counts"];
    let (sem, topo) = (c["semantic"].as_u64().unwrap(), c["topology"].as_u64().unwrap());
    assert!(topo * 5 < sem, "{topo} vs {sem}");
    let sum: u64 = ["semantic", "topology", "fusion", "classifier"]
        .iter()
        .map(|k| c[k].as_u64().unwrap())
        .sum();
    assert_eq!(sum, c["total"].as_u64().unwrap());
    let out = ok(&["params", "--set", "scheme=topology_only"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["counts"]["semantic"], 0);
    assert_eq!(v["counts"]["fusion"], 0);
}

#[test]
fn convert_builds_dataset_from_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path();
    std::fs::write(raw.join("x.csv"), "f0,f1\n0.5,1\n-1,2\n3,0.25\n0,0\n").unwrap();
    std::fs::write(raw.join("y.csv"), "node_id,label\n0,0\n1,1\n2,0\n3,1\n").unwrap();
    std::fs::write(raw.join("a.csv"), "src,dst\n0,1\n1,0\n2,3\n").unwrap();
    std::fs::write(raw.join("b.csv"), "src,dst\n").unwrap();
    let cfg = raw.join("convert.json");
    let text = serde_json::json!({
        "features_csv": raw.join("x.csv"),
        "labels_csv": raw.join("y.csv"),
        "relations": [{"name": "upu", "edges": raw.join("a.csv")}, {"name": "usu", "edges": raw.join("b.csv")}],
    });
    std::fs::write(&cfg, text.to_string()).unwrap();
    let out = raw.join("ds");
    ok(&["convert", "--config", s(&cfg), "--out", s(&out)]);
    let m = read_json(&out.join("manifest.json"));
    assert_eq!(m["num_nodes"], 4);
    assert_eq!(m["relation_names"], serde_json::json!(["upu", "usu"]));
    let edges = std::fs::read_to_string(out.join(m["files"]["edges"][0].as_str().unwrap())).unwrap();
    assert_eq!(edges, "src,dst\n0,1\n2,3\n");
}

#[test]
fn similarity_and_ablation_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    synth(&data);
    let sim = tmp.path().join("sim");
    let mut args = vec!["similarity", "--data", s(&data), "--out", s(&sim)];
    args.extend_from_slice(SMALL_TRAIN);
    ok(&args);
    let csv = std::fs::read_to_string(sim.join("similarity.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,cos_sim,cka,degenerate");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0,"));
    let abl = tmp.path().join("abl");
    let mut args = vec![
        "ablate",
        "--data",
        s(&data),
        "--out",
        s(&abl),
        "--schemes",
        "concat,add,semantic_only",
    ];
    args.extend_from_slice(SMALL_TRAIN);
    ok(&args);
    let csv = std::fs::read_to_string(abl.join("ablation.csv")).unwrap();
    let labels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["concat", "add", "semantic_only"]);
    let line = err_line(&[
        "similarity",
        "--data",
        s(&data),
        "--out",
        s(&tmp.path().join("x")),
        "--set",
        "scheme=add,",
    ]);
    assert!(line.starts_with("error[json]"), "{line}");
}
