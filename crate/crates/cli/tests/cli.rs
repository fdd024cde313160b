use std::path::Path;
use std::process::{Command, Output};

fn tuberel(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tuberel"))
        .args(args)
        .current_dir(dir)
        .env("SF_THREADS", "1")
        .output()
        .expect("spawn tuberel")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = tuberel(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr_line(out: &Output) -> String {
    let s = String::from_utf8_lossy(&out.stderr).to_string();
    let lines: Vec<&str> = s.lines().filter(|l| l.starts_with("error ")).collect();
    assert_eq!(lines.len(), 1, "{s}");
    lines[0].to_string()
}

const SCENARIO: &str = r#"{
  "name": "tiny", "split": "train", "num_videos": 8, "frames_per_video": 90,
  "num_entities": 3, "predicates": ["chase", "behind", "touch"],
  "relations_per_video": 1, "span_ranges": [[30, 40]], "noise": 0.003, "seed": 4
}"#;

#[test]
fn gen_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen", "--suite", "separable", "--seed", "7", "--out", "a"], dir.path());
    ok(&["gen", "--suite", "separable", "--seed", "7", "--out", "b"], dir.path());
    for f in ["separable_train.json", "separable_test.json"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    ok(&["gen", "--suite", "compositional", "--seed", "8", "--out", "c"], dir.path());
    assert_ne!(
        std::fs::read(dir.path().join("a/separable_test.json")).unwrap(),
        std::fs::read(dir.path().join("c/compositional_test.json")).unwrap()
    );
}

#[test]
fn exit_codes_and_single_line_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&tuberel(&["--help"], p)), 0);

    let out = tuberel(&["frobnicate"], p);
    assert_eq!(code(&out), 1);
    assert!(stderr_line(&out).contains("kind=usage"));

    let out = tuberel(&["gen", "--suite", "separable"], p);
    assert_eq!(code(&out), 1, "missing --out");

    let out = tuberel(&["gen", "--suite", "nope", "--out", "x"], p);
    assert_eq!(code(&out), 1);
    assert!(stderr_line(&out).contains("kind=invalid_argument"));

    let out = tuberel(&["train-stage1", "--train", "missing.json", "--out", "s1.json"], p);
    assert_eq!(code(&out), 2);
    assert!(stderr_line(&out).contains("kind=io"));

    std::fs::write(p.join("bad.json"), "{ not json").unwrap();
    let out = tuberel(&["propose", "--data", "bad.json", "--stage1", "bad.json", "--out", "p.jsonl"], p);
    assert_eq!(code(&out), 2);

    let out = tuberel(&["gradcheck", "--configs", "0"], p);
    assert_eq!(code(&out), 1);

    let out = Command::new(env!("CARGO_BIN_EXE_tuberel"))
        .args(["gradcheck", "--configs", "1"])
        .current_dir(p)
        .env("SF_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn tiny_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("scenario.json"), SCENARIO).unwrap();
    ok(&["gen", "--scenario", "scenario.json", "--out", "data"], p);
    let data = "data/tiny_train.json";
    let small = ["--d", "8", "--k", "4", "--epochs", "2", "--batch", "32"];
    let with = |base: &[&str]| -> Vec<String> { base.iter().chain(small.iter()).map(|s| s.to_string()).collect() };
    let run = |args: Vec<String>| ok(&args.iter().map(String::as_str).collect::<Vec<_>>(), p);

    run(with(&["train-stage1", "--train", data, "--out", "m/s1.json"]));
    let csv = std::fs::read_to_string(p.join("m/s1.loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(csv.lines().next(), Some("epoch,loss"));
    ok(&["propose", "--data", data, "--stage1", "m/s1.json", "--out", "props.jsonl"], p);
    run(with(&["train-stage2", "--train", data, "--proposals", "props.jsonl", "--stage1", "m/s1.json", "--out", "m/s2.json"]));
    ok(&["detect", "--data", data, "--proposals", "props.jsonl", "--stage2", "m/s2.json", "--out", "det.jsonl"], p);
    let table = ok(&["eval", "--data", data, "--detections", "det.jsonl", "--out", "report.json", "--csv", "dur.csv"], p);
    assert!(table.contains("detection mAP"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("report.json")).unwrap()).unwrap();
    for key in ["p_at", "map", "recall_at", "per_duration"] {
        assert!(report.get(key).is_some(), "{key}");
    }
    assert!(std::fs::read_to_string(p.join("dur.csv")).unwrap().starts_with("bucket,map\n"));

    // Shape overrides must agree with the checkpoint.
    let out = tuberel(&["propose", "--data", data, "--stage1", "m/s1.json", "--k", "5", "--out", "x.jsonl"], p);
    assert_eq!(code(&out), 2);
    assert!(stderr_line(&out).contains("kind=schema"));
    // A stage-1 checkpoint is not a predicate model.
    let out = tuberel(&["detect", "--data", data, "--proposals", "props.jsonl", "--stage2", "m/s1.json", "--out", "x.jsonl"], p);
    assert_eq!(code(&out), 2);

    // Schema version mismatch is refused.
    let mut ck: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("m/s1.json")).unwrap()).unwrap();
    ck["schema_version"] = serde_json::json!(2);
    std::fs::write(p.join("old.json"), serde_json::to_vec(&ck).unwrap()).unwrap();
    let out = tuberel(&["propose", "--data", data, "--stage1", "old.json", "--out", "x.jsonl"], p);
    assert_eq!(code(&out), 2);
    assert!(stderr_line(&out).contains("kind=schema"));

    let hits = ok(&["search", "--data", data, "--proposals", "props.jsonl", "--model", "m/s2.json", "--primitives", "0,1,2,3", "--top", "3", "--out", "hits.jsonl"], p);
    assert!(hits.starts_with("query primitives [0, 1, 2, 3]"));
    std::fs::write(
        p.join("query.json"),
        r#"[{"subject": {"x1": 0.2, "y1": 0.2, "x2": 0.3, "y2": 0.3}, "object": {"x1": 0.3, "y1": 0.2, "x2": 0.4, "y2": 0.3}}]"#,
    )
    .unwrap();
    ok(&["search", "--data", data, "--proposals", "props.jsonl", "--model", "m/s1.json", "--query", "query.json"], p);

    let dur = ok(&["duration-report", "--test", data, "--detections", "det.jsonl", "--out", "dr"], p);
    assert!(dur.starts_with("bucket,map\n"));
    assert!(p.join("dr/report.json").exists() && p.join("dr/duration.csv").exists());
}

#[test]
fn gradcheck_subcommand_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--configs", "3", "--out", "g.json"], dir.path());
    assert_eq!(out.lines().count(), 6);
    let cases: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("g.json")).unwrap()).unwrap();
    assert_eq!(cases.as_array().unwrap().len(), 18);
}
