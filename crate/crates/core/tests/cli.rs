use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spatial-rl")).args(args).output().expect("binary runs")
}

fn stdout_json_lines(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&out.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn score_perfect_response_totals_one() {
    let out = run(&["score", "--responses", path(&fixture("responses.jsonl")), "--truth", path(&fixture("truth.jsonl"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = stdout_json_lines(&out);
    assert_eq!(rows.len(), 3);
    assert!((rows[0]["total"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(rows[1]["r_accuracy"], 0);
    assert!(rows[1]["total"].as_f64().unwrap() <= 0.3);
    assert_eq!(rows[2]["r_format"], 0);
    assert_eq!(rows[2]["total"].as_f64().unwrap(), 0.0);
}

#[test]
fn score_missing_truth_is_io_error() {
    let out = run(&["score", "--responses", path(&fixture("responses.jsonl")), "--truth", "/nonexistent/truth.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\n[grpo]\nbogus = 3\n").unwrap();
    let out = run(&["--config", path(&cfg), "gradcheck"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn example_config_is_accepted() {
    let out = run(&["--config", path(&fixture("run.toml")), "gradcheck"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn grpo_step_matches_hand_computation() {
    let out = run(&["grpo-step", "--rollouts", path(&fixture("rollouts.jsonl"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = stdout_json_lines(&out);
    assert_eq!(rows.len(), 2);

    // rewards [1, 0]: mean 0.5, sigma 0.5.
    let a = 0.5 / (0.5 + 1e-6);
    let ratio = 0.1f64.exp();
    let kl = (-0.1f64).exp() + 0.1 - 1.0;
    let first = ratio * a - 0.01 * kl;
    let second = -a;
    let expected = -(first + second) / 2.0;
    let got = rows[0]["loss"].as_f64().unwrap();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    assert_eq!(rows[0]["group"], 0);

    assert_eq!(rows[1]["loss"].as_f64().unwrap(), 0.0);
}

#[test]
fn grpo_step_misaligned_exits_two() {
    let out = run(&["grpo-step", "--rollouts", path(&fixture("misaligned.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_fault_is_caught() {
    let ok = run(&["gradcheck"]);
    assert!(ok.status.success());
    let report: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-4);

    let bad = run(&["gradcheck", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(1));

    let strict = run(&["gradcheck", "--threshold", "1e-30"]);
    assert_eq!(strict.status.code(), Some(1));
}

#[test]
fn extract_subgraph_known_and_unknown_ids() {
    let corpus = fixture("corpus.jsonl");
    let out = run(&["extract-subgraph", "--corpus", path(&corpus), "--image-id", "kitchen", "--question", "Is the cup left of the plate?"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let g: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let labels: Vec<&str> = g["objects"].as_array().unwrap().iter().map(|o| o["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["cup", "plate"]);
    assert_eq!(g["relations"].as_array().unwrap().len(), 1);

    let missing = run(&["extract-subgraph", "--corpus", path(&corpus), "--image-id", "attic", "--question", "Where is the cup?"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn build_dataset_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture("corpus.jsonl");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = run(&["build-dataset", "--corpus", path(&corpus), "--out", path(d), "--seed", "5"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["train.jsonl", "val.jsonl", "report.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["corpus_records"], 3);
    let errors = report["corpus_errors"].as_array().unwrap();
    assert_eq!(errors.len(), 1);
    assert_eq!(errors[0]["image_id"], "broken");
}

#[test]
fn simulate_hacking_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("m.csv");
    let out = run(&["simulate-hacking", "--episodes", "50", "--out", path(&csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("step,agent,"));
    assert_eq!(text.lines().count(), 1 + 50 * 4);
}
