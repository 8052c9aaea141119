use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

fn cpodrift(out: Option<&Path>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cpodrift"));
    cmd.env_remove("DRIFTCPO_OUT");
    if let Some(out) = out {
        cmd.arg("--out").arg(out);
    }
    cmd.args(args).output().unwrap()
}

fn code(output: &Output) -> i32 {
    output.status.code().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates a small world and a start policy; returns (world dir, sft dir).
fn small_pipeline(root: &Path) -> (PathBuf, PathBuf) {
    let world = root.join("world");
    let sft = root.join("sft");
    let out = cpodrift(
        Some(&world),
        &[
            "gen-world",
            "--seed",
            "1",
            "--num-records",
            "40",
            "--eval-records",
            "20",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let records = world.join("records.jsonl");
    let graph = world.join("graph.json");
    let out = cpodrift(
        Some(&sft),
        &[
            "sft",
            "--records",
            s(&records),
            "--graph",
            s(&graph),
            "--epochs",
            "1",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    (world, sft)
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&cpodrift(None, &["--help"])), 0);
    assert_eq!(code(&cpodrift(None, &["--version"])), 0);
    assert_eq!(code(&cpodrift(None, &["train", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&cpodrift(None, &["no-such-command"])), 1);
    assert_eq!(code(&cpodrift(None, &[])), 1);
    assert_eq!(code(&cpodrift(None, &["graph-validate"])), 1);
    assert_eq!(
        code(&cpodrift(
            None,
            &[
                "drift-report",
                "--records",
                "x",
                "--divergence",
                "hellinger"
            ]
        )),
        1
    );
}

#[test]
fn graph_validate_records_digests_of_inputs_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("validate");
    let graph = fixture("chest_xray_graph.json");
    let result = cpodrift(Some(&out), &["graph-validate", "--graph", s(&graph)]);
    assert_eq!(code(&result), 0);
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.contains("12 entities, 53 attributes"), "{stdout}");

    let m = manifest(&out);
    assert_eq!(m["format"], "cpodrift-manifest");
    assert_eq!(m["status"], "complete");
    assert_eq!(m["command"]["graph-validate"]["graph"], s(&graph));
    let input_digest = hex::encode(Sha256::digest(fs::read(&graph).unwrap()));
    assert_eq!(m["inputs"][0]["sha256"], input_digest.as_str());
    let output = &m["outputs"][0];
    assert_eq!(output["path"], "validation.json");
    let written = fs::read(out.join("validation.json")).unwrap();
    assert_eq!(
        output["sha256"],
        hex::encode(Sha256::digest(&written)).as_str()
    );
    let report: Value = serde_json::from_slice(&written).unwrap();
    assert_eq!(report["entities"], 12);
    assert_eq!(report["attributes"], 53);
}

#[test]
fn invalid_input_exits_two_and_leaves_the_manifest_running() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"entities": [{"id": "e"}], "attributes": []}"#).unwrap();
    let out = dir.path().join("run");
    let result = cpodrift(Some(&out), &["graph-validate", "--graph", s(&bad)]);
    assert_eq!(code(&result), 2);
    assert!(String::from_utf8_lossy(&result.stderr).contains("cpodrift graph-validate"));
    let m = manifest(&out);
    assert_eq!(m["status"], "running");
    assert_eq!(m["outputs"].as_array().unwrap().len(), 0);

    let missing = dir.path().join("absent.json");
    assert_eq!(
        code(&cpodrift(
            Some(&out),
            &["graph-validate", "--graph", s(&missing)]
        )),
        2
    );
}

#[test]
fn unwritable_output_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    let graph = fixture("chest_xray_graph.json");
    let result = cpodrift(
        Some(&blocker.join("out")),
        &["graph-validate", "--graph", s(&graph)],
    );
    assert_eq!(code(&result), 3);
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("from-env");
    let graph = fixture("chest_xray_graph.json");
    let result = Command::new(env!("CARGO_BIN_EXE_cpodrift"))
        .env("DRIFTCPO_OUT", &out)
        .args(["graph-validate", "--graph", s(&graph)])
        .output()
        .unwrap();
    assert_eq!(code(&result), 0);
    assert!(out.join("validation.json").exists());
    assert_eq!(manifest(&out)["status"], "complete");
}

#[test]
fn replay_detects_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("graph.json");
    fs::copy(fixture("chest_xray_graph.json"), &graph).unwrap();
    let first = dir.path().join("first");
    assert_eq!(
        code(&cpodrift(
            Some(&first),
            &["graph-validate", "--graph", s(&graph)]
        )),
        0
    );
    let recorded = first.join("manifest.json");

    let again = dir.path().join("again");
    let ok = cpodrift(Some(&again), &["replay", s(&recorded)]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("replay matched 1 outputs"));
    assert_eq!(
        fs::read(first.join("validation.json")).unwrap(),
        fs::read(again.join("validation.json")).unwrap()
    );

    assert_eq!(code(&cpodrift(Some(&first), &["replay", s(&recorded)])), 1);

    let mut text = fs::read_to_string(&graph).unwrap();
    text.push('\n');
    fs::write(&graph, text).unwrap();
    let changed = cpodrift(Some(&dir.path().join("changed")), &["replay", s(&recorded)]);
    assert_eq!(code(&changed), 2);
}

#[test]
fn pipeline_artifacts_and_training_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (world, sft) = small_pipeline(dir.path());
    for file in [
        "graph.json",
        "vocab.txt",
        "records.jsonl",
        "eval.jsonl",
        "world.json",
    ] {
        assert!(world.join(file).exists(), "{file}");
    }
    let gold: Value =
        serde_json::from_str(&fs::read_to_string(world.join("world.json")).unwrap()).unwrap();
    assert_eq!(gold["records"].as_array().unwrap().len(), 40);

    let records = world.join("records.jsonl");
    let graph = world.join("graph.json");
    let checkpoint = sft.join("checkpoint.json");
    let synth = dir.path().join("synth");
    assert_eq!(
        code(&cpodrift(
            Some(&synth),
            &["synth-cf", "--records", s(&records), "--graph", s(&graph)]
        )),
        0
    );
    let pairs = synth.join("pairs.jsonl");
    let header = fs::read_to_string(&pairs).unwrap();
    assert!(header.lines().next().unwrap().contains("cpodrift-pairs"));

    let none = cpodrift(
        Some(&dir.path().join("none")),
        &[
            "train",
            "--records",
            s(&records),
            "--checkpoint",
            s(&checkpoint),
            "--pairs",
            s(&pairs),
            "--ablation",
            "none",
        ],
    );
    assert_eq!(code(&none), 2);

    let perception_only = cpodrift(
        Some(&dir.path().join("perception")),
        &[
            "train",
            "--records",
            s(&records),
            "--checkpoint",
            s(&checkpoint),
            "--pairs",
            s(&pairs),
            "--ablation",
            "perception",
        ],
    );
    assert_eq!(code(&perception_only), 2);

    let trained = dir.path().join("train");
    let ok = cpodrift(
        Some(&trained),
        &[
            "train",
            "--records",
            s(&records),
            "--checkpoint",
            s(&checkpoint),
            "--pairs",
            s(&pairs),
            "--epochs",
            "2",
        ],
    );
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    let history: Value =
        serde_json::from_str(&fs::read_to_string(trained.join("history.json")).unwrap()).unwrap();
    assert_eq!(history["history"].as_array().unwrap().len(), 2);
    assert_eq!(history["perception_pairs"], 0);

    let eval = dir.path().join("eval");
    let ok = cpodrift(
        Some(&eval),
        &[
            "eval-robustness",
            "--records",
            s(&world.join("eval.jsonl")),
            "--graph",
            s(&graph),
            "--checkpoint",
            &format!("start={}", s(&checkpoint)),
            "--checkpoint",
            s(&trained.join("checkpoint.json")),
            "--ratios",
            "0,0.5",
            "--seeds",
            "0",
        ],
    );
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    let csv = fs::read_to_string(eval.join("accuracy.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    assert!(csv.contains("start") && csv.contains("checkpoint"));

    let bad_ratio = cpodrift(
        Some(&dir.path().join("bad-ratio")),
        &[
            "eval-robustness",
            "--records",
            s(&world.join("eval.jsonl")),
            "--graph",
            s(&graph),
            "--checkpoint",
            s(&checkpoint),
            "--ratios",
            "0,1.5",
        ],
    );
    assert_ne!(code(&bad_ratio), 0);
}

#[test]
fn drift_report_and_probe_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (world, sft) = small_pipeline(dir.path());
    let records = world.join("records.jsonl");
    let checkpoint = sft.join("checkpoint.json");

    let without_states = cpodrift(
        Some(&dir.path().join("no-states")),
        &["drift-report", "--records", s(&records)],
    );
    assert_eq!(code(&without_states), 1);
    assert!(String::from_utf8_lossy(&without_states.stderr).contains("--checkpoint"));

    let drift = dir.path().join("drift");
    let ok = cpodrift(
        Some(&drift),
        &[
            "drift-report",
            "--records",
            s(&records),
            "--checkpoint",
            s(&checkpoint),
        ],
    );
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    let reports = fs::read_to_string(drift.join("drift.jsonl")).unwrap();
    assert_eq!(reports.lines().count(), 40);
    let first: Value = serde_json::from_str(reports.lines().next().unwrap()).unwrap();
    assert!(first["thinking"].as_array().is_some());
    assert!(fs::read_to_string(drift.join("events.csv"))
        .unwrap()
        .starts_with("record_id"));

    let probe = dir.path().join("probe");
    let ok = cpodrift(
        Some(&probe),
        &[
            "probe",
            "--records",
            s(&records),
            "--graph",
            s(&world.join("graph.json")),
            "--checkpoint",
            s(&checkpoint),
            "--record-id",
            "r00000",
        ],
    );
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(probe.join("probe.json")).unwrap()).unwrap();
    let original: f64 = report["original_z"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .sum();
    assert!((original - 1.0).abs() < 1e-9);

    let unknown = cpodrift(
        Some(&dir.path().join("probe-missing")),
        &[
            "probe",
            "--records",
            s(&records),
            "--graph",
            s(&world.join("graph.json")),
            "--checkpoint",
            s(&checkpoint),
            "--record-id",
            "nope",
        ],
    );
    assert_eq!(code(&unknown), 2);
}
