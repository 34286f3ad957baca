use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_parajoint"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_lines(path: &Path, lines: &[Value]) {
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    fs::write(path, text).unwrap();
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let topics = [
            ("aspirin", "bleeding"),
            ("insulin", "glucose"),
            ("statin", "cholesterol"),
            ("vitamin", "fracture"),
            ("caffeine", "sleep"),
            ("zinc", "infection"),
        ];
        let mut docs = Vec::new();
        let mut claims = Vec::new();
        for (i, (drug, outcome)) in topics.iter().enumerate() {
            let verb = if i % 2 == 0 { "increases" } else { "reduces" };
            docs.push(json!({
                "doc_id": 100 + i,
                "title": format!("{drug} and {outcome}"),
                "abstract": [
                    format!("We studied {drug} in a large cohort."),
                    format!("{drug} {verb} {outcome} in treated patients."),
                    "Further work is needed.".to_string(),
                ],
            }));
            let label = if i % 2 == 0 { "SUPPORT" } else { "CONTRADICT" };
            claims.push(json!({
                "id": i + 1,
                "claim": format!("{drug} increases {outcome}"),
                "evidence": {(100 + i).to_string(): [{"sentences": [1], "label": label}]},
                "cited_doc_ids": [100 + i],
            }));
        }
        write_lines(&root.join("corpus.jsonl"), &docs);
        write_lines(&root.join("claims.jsonl"), &claims);
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> String {
        self.root.join(name).to_string_lossy().into_owned()
    }
}

#[test]
fn retrieve_writes_rankings() {
    let f = Fixture::new();
    let out = run(&[
        "retrieve", "--corpus", &f.path("corpus.jsonl"), "--claims", &f.path("claims.jsonl"),
        "--k", "3", "--backend", "tfidf", "--out", &f.path("retrieved.jsonl"),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(f.path("retrieved.jsonl")).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    assert!(lines.iter().all(|l| l["doc_ids"].as_array().unwrap().len() == 3));
    assert_eq!(lines[0]["doc_ids"][0], 100);
}

#[test]
fn unknown_flag_prints_usage_and_exits_1() {
    let out = run(&["retrieve", "--bogus"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn single_epoch_config_is_rejected() {
    let f = Fixture::new();
    fs::write(f.root.join("train.json"), r#"{"total_epochs": 1}"#).unwrap();
    let out = run(&["train", "--config", &f.path("train.json")]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_config_key_is_rejected() {
    let f = Fixture::new();
    fs::write(f.root.join("train.json"), r#"{"gama": 6}"#).unwrap();
    let out = run(&["train", "--config", &f.path("train.json")]);
    assert_eq!(code(&out), 1);
}

#[test]
fn missing_input_is_a_runtime_failure() {
    let f = Fixture::new();
    let out = run(&[
        "retrieve", "--corpus", &f.path("absent.jsonl"), "--claims", &f.path("claims.jsonl"),
        "--out", &f.path("r.jsonl"),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn selftest_passes() {
    let out = run(&["selftest"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert_eq!(stdout(&out).matches("[PASS]").count(), 3);
}

#[test]
fn build_train_predict_evaluate_round_trip() {
    let f = Fixture::new();
    let corpus_before = fs::read(f.path("corpus.jsonl")).unwrap();
    let out = run(&[
        "build-data", "--corpus", &f.path("corpus.jsonl"), "--claims", &f.path("claims.jsonl"),
        "--k-train", "2", "--out", &f.path("train.jsonl"),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(f.path("train.jsonl")).unwrap().lines().count(), 18);

    fs::write(
        f.root.join("train.json"),
        r#"{"total_epochs": 3, "learning_rate": 0.001, "encoder_learning_rate": 0.001, "d_model": 16, "n_heads": 2, "n_layers": 1, "d_ff": 32}"#,
    )
    .unwrap();
    let out = run(&[
        "train", "--config", &f.path("train.json"), "--train", &f.path("train.jsonl"),
        "--dev", &f.path("train.jsonl"), "--gamma", "6", "--seed", "7",
        "--out", &f.path("model.json"), "--metrics-log", &f.path("metrics.jsonl"),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(f.path("metrics.jsonl")).unwrap();
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["epoch", "L_rationale", "L_stance", "L_total", "p_sample", "dev"] {
        assert!(first.get(key).is_some(), "metrics log lacks {key}");
    }
    assert_eq!(log.lines().count(), 3);

    let predict = |out_name: &str, sub_name: &str| {
        run(&[
            "predict", "--checkpoint", &f.path("model.json"), "--corpus", &f.path("corpus.jsonl"),
            "--claims", &f.path("claims.jsonl"), "--task", "oracle",
            "--out", &f.path(out_name), "--submission", &f.path(sub_name),
        ])
    };
    let out = predict("outputs.jsonl", "submission.jsonl");
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = predict("outputs2.jsonl", "submission2.jsonl");
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(f.path("outputs.jsonl")).unwrap(), fs::read(f.path("outputs2.jsonl")).unwrap());
    assert_eq!(fs::read_to_string(f.path("submission.jsonl")).unwrap().lines().count(), 6);

    for pred in ["outputs.jsonl", "submission.jsonl"] {
        let out = run(&["evaluate", "--pred", &f.path(pred), "--gold", &f.path("claims.jsonl")]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let text = stdout(&out);
        for block in ["selection-only", "selection+label", "label-only", "label+rationale"] {
            assert!(text.contains(block), "missing {block} in {text}");
        }
    }
    assert_eq!(fs::read(f.path("corpus.jsonl")).unwrap(), corpus_before);
}
