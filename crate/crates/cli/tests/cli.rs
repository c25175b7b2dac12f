use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn textclust(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_textclust"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn base_args<'a>(corpus: &'a str, script: &'a str, out: &'a str) -> Vec<&'a str> {
    vec!["--corpus", corpus, "--mock-script", script, "--out-dir", out]
}

const ARTIFACTS: [&str; 8] = [
    "config.json",
    "stage1.jsonl",
    "histogram.json",
    "aggregation.json",
    "stage3.jsonl",
    "report.json",
    "confusion.csv",
    "summary.json",
];

fn artifacts(dir: &Path) -> Vec<(String, Option<Vec<u8>>)> {
    ARTIFACTS
        .iter()
        .map(|n| (n.to_string(), std::fs::read(dir.join(n)).ok()))
        .collect()
}

fn audit_lines(dir: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(dir.join("logs/completions.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn run_reports_scripted_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let (corpus, script) = (fixture("reviews.jsonl"), fixture("reviews_script.json"));
    let out = tmp.path().join("run");
    let mut args = vec!["run"];
    args.extend(base_args(corpus.to_str().unwrap(), script.to_str().unwrap(), out.to_str().unwrap()));
    let res = textclust(&args);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let row = stdout(&res);
    assert!(row.contains("reviews"));
    assert!(row.contains("0.8500"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["accuracy"], 0.85);
    assert_eq!(report["confusion_csv_path"], "confusion.csv");
}

#[test]
fn composed_stages_equal_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (corpus, script) = (fixture("reviews.jsonl"), fixture("reviews_script.json"));
    let (c, s) = (corpus.to_str().unwrap(), script.to_str().unwrap());
    let whole = tmp.path().join("whole");
    let parts = tmp.path().join("parts");

    let mut run = vec!["run", "--order", "ct"];
    run.extend(base_args(c, s, whole.to_str().unwrap()));
    assert_eq!(code(&textclust(&run)), 0);

    for cmd in ["infer", "aggregate", "predict", "evaluate"] {
        let mut args = vec![cmd, "--order", "ct"];
        args.extend(base_args(c, s, parts.to_str().unwrap()));
        let res = textclust(&args);
        assert_eq!(code(&res), 0, "{cmd}: {}", stderr(&res));
    }
    let whole_files = artifacts(&whole);
    let part_files = artifacts(&parts);
    for ((name, a), (_, b)) in whole_files.iter().zip(&part_files) {
        if name == "summary.json" {
            assert!(a.is_some() && b.is_none());
            continue;
        }
        assert!(a.is_some(), "{name} missing");
        assert_eq!(a, b, "{name} differs");
    }
}

#[test]
fn warm_cache_rerun_is_byte_identical_without_backend_calls() {
    let tmp = tempfile::tempdir().unwrap();
    let (corpus, script) = (fixture("reviews.jsonl"), fixture("reviews_script.json"));
    let out = tmp.path().join("run");
    let mut args = vec!["run"];
    args.extend(base_args(corpus.to_str().unwrap(), script.to_str().unwrap(), out.to_str().unwrap()));

    assert_eq!(code(&textclust(&args)), 0);
    let first = artifacts(&out);
    let cold = audit_lines(&out).len();
    assert!(audit_lines(&out).iter().any(|l| l["cached"] == false));

    assert_eq!(code(&textclust(&args)), 0);
    assert_eq!(artifacts(&out), first);
    let lines = audit_lines(&out);
    assert_eq!(lines.len(), 2 * cold);
    assert!(lines[cold..].iter().all(|l| l["cached"] == true));
    assert!(lines.iter().all(|l| l["fingerprint"].as_str().unwrap().len() == 64));
}

#[test]
fn infer_rerun_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let (corpus, script) = (fixture("reviews.jsonl"), fixture("reviews_script.json"));
    let out = tmp.path().join("infer");
    let mut args = vec!["infer"];
    args.extend(base_args(corpus.to_str().unwrap(), script.to_str().unwrap(), out.to_str().unwrap()));
    let first = textclust(&args);
    assert_eq!(code(&first), 0);
    assert!(stdout(&first).contains("40 predictions"));
    let stage1 = std::fs::read(out.join("stage1.jsonl")).unwrap();
    assert_eq!(stage1.iter().filter(|&&b| b == b'\n').count(), 40);
    let hist = std::fs::read(out.join("histogram.json")).unwrap();
    assert_eq!(code(&textclust(&args)), 0);
    assert_eq!(std::fs::read(out.join("stage1.jsonl")).unwrap(), stage1);
    assert_eq!(std::fs::read(out.join("histogram.json")).unwrap(), hist);
    assert!(audit_lines(&out)[40..].iter().all(|l| l["cached"] == true));
}

#[test]
fn never_k_aggregation_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let (corpus, script) = (fixture("reviews.jsonl"), fixture("never_k_script.json"));
    let out = tmp.path().join("run");
    let mut args = vec!["run"];
    args.extend(base_args(corpus.to_str().unwrap(), script.to_str().unwrap(), out.to_str().unwrap()));
    let res = textclust(&args);
    assert_eq!(code(&res), 4, "{}", stderr(&res));
    let outcome: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("aggregation.json")).unwrap()).unwrap();
    assert!(outcome["selected"].is_null());
    assert_eq!(outcome["accepted"], serde_json::json!([]));
    assert!(!out.join("stage3.jsonl").exists());
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let script = fixture("reviews_script.json");
    let out = tmp.path().join("x");
    let o = out.to_str().unwrap();

    let res = textclust(&["infer", "--corpus", "/no/such/corpus.jsonl", "--mock-script", script.to_str().unwrap(), "--out-dir", o]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("/no/such/corpus.jsonl"));

    let corpus = fixture("reviews.jsonl");
    let res = textclust(&["aggregate", "--corpus", corpus.to_str().unwrap(), "--mock-script", script.to_str().unwrap(), "--out-dir", o]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("histogram.json"));

    let res = textclust(&["run", "--corpus", corpus.to_str().unwrap(), "--out-dir", o]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("mock-script"));

    let res = textclust(&["run", "--order", "sideways"]);
    assert_eq!(code(&res), 2);

    let res = textclust(&["run", "--corpus", corpus.to_str().unwrap(), "--mock-script", script.to_str().unwrap(), "--out-dir", o, "--mode", "gold", "--k", "3"]);
    assert_eq!(code(&res), 2);
}

#[test]
fn unreachable_endpoint_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = fixture("reviews.jsonl");
    let out = tmp.path().join("x");
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "[backend]\nretry_max = 0\nbackoff_ms = 1\ntimeout_secs = 2\n").unwrap();
    let res = textclust(&[
        "infer",
        "--config",
        cfg.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--backend",
        "http",
        "--base-url",
        "http://127.0.0.1:9/v1",
        "--api-key-env",
        "",
        "--model",
        "m",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 3, "{}", stderr(&res));
}

#[test]
fn gold_mode_with_echo_mock() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = fixture("reviews.jsonl");
    let script = tmp.path().join("echo.toml");
    std::fs::write(&script, "default = \"Class 0\"\n").unwrap();
    let out = tmp.path().join("gold");
    let res = textclust(&[
        "run",
        "--mode",
        "gold",
        "--corpus",
        corpus.to_str().unwrap(),
        "--mock-script",
        script.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(!out.join("stage1.jsonl").exists());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["accuracy"], 0.5);
    let stages: Vec<String> = audit_lines(&out).iter().map(|l| l["stage"].as_str().unwrap().to_owned()).collect();
    assert_eq!(stages.len(), 40);
    assert!(stages.iter().all(|s| s == "final_prediction"));
}

#[test]
fn evaluate_on_five_classes_uses_brute_force() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("topics.jsonl");
    let titles = ["World", "Sports", "Business", "Science", "Health"];
    let mut body = String::new();
    for i in 0..25 {
        body.push_str(&format!(
            "{{\"id\": \"{i}\", \"text\": \"item {i} tag{}\", \"gold_label\": \"{}\"}}\n",
            i % 5,
            titles[i % 5]
        ));
    }
    std::fs::write(&corpus, body).unwrap();
    let script = tmp.path().join("s.json");
    let rules: Vec<serde_json::Value> = (0..5)
        .map(|j| serde_json::json!({"stage": "final_prediction", "contains": [format!("tag{j}")], "response": format!("Class {}", (j + 2) % 5)}))
        .collect();
    std::fs::write(&script, serde_json::json!({"default": "", "rules": rules}).to_string()).unwrap();
    let out = tmp.path().join("run");
    let (c, s, o) = (corpus.to_str().unwrap(), script.to_str().unwrap(), out.to_str().unwrap());
    assert_eq!(code(&textclust(&["predict", "--mode", "gold", "--corpus", c, "--mock-script", s, "--out-dir", o])), 0);
    let res = textclust(&["evaluate", "--out-dir", o]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(stdout(&res).contains("1.0000"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["method"], "brute_force");
    assert_eq!(report["assignment"], serde_json::json!([3, 4, 0, 1, 2]));
}

#[test]
fn multi_run_summary_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let (corpus, script) = (fixture("reviews.jsonl"), fixture("reviews_script.json"));
    let out = tmp.path().join("five");
    let mut args = vec!["run", "--runs", "5", "--fraction", "0.5", "--seed", "11"];
    args.extend(base_args(corpus.to_str().unwrap(), script.to_str().unwrap(), out.to_str().unwrap()));
    let res = textclust(&args);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    for i in 0..5 {
        let cfg: serde_json::Value =
            serde_json::from_slice(&std::fs::read(out.join(format!("run_{i}/config.json"))).unwrap()).unwrap();
        assert_eq!(cfg["seed"], 11 + i);
    }
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["completed"], 5);
    assert_eq!(summary["std"], 0.0);

    let gold = tmp.path().join("gold");
    let echo = tmp.path().join("echo.toml");
    std::fs::write(&echo, "default = \"Class 0\"\n").unwrap();
    let res = textclust(&["run", "--mode", "gold", "--corpus", corpus.to_str().unwrap(), "--mock-script", echo.to_str().unwrap(), "--out-dir", gold.to_str().unwrap()]);
    assert_eq!(code(&res), 0);

    let res = textclust(&["report", out.to_str().unwrap(), gold.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let text = stdout(&res);
    assert!(text.contains("macro"));
    assert!(text.contains("0.6750"), "{text}");
}

#[test]
fn ingest_normalizes_and_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("in.csv");
    let mut body = String::from("id,text,label\n");
    let sizes = [3, 1, 4, 2, 5, 6];
    let mut n = 0;
    for (c, &size) in sizes.iter().enumerate() {
        for _ in 0..size {
            body.push_str(&format!("{n},\"text, number {n}\",c{c}\n"));
            n += 1;
        }
    }
    std::fs::write(&csv, body).unwrap();
    let out = tmp.path().join("canon.jsonl");
    let res = textclust(&[
        "ingest",
        "--corpus",
        csv.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--name",
        "toy",
        "--split-drop",
        "2",
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 21);
    let front = std::fs::read_to_string(tmp.path().join("canon.front.jsonl")).unwrap();
    let back = std::fs::read_to_string(tmp.path().join("canon.back.jsonl")).unwrap();
    assert_eq!(front.lines().count() + back.lines().count(), 21 - 3);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("canon.front.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["class_titles"], serde_json::json!(["c0", "c2"]));
}
