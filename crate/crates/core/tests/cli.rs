use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use medadapt::backend::{Backend, MockBackend, MockScript};
use medadapt::cli::{run_with, Io};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str], backend: Option<Arc<dyn Backend>>) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_with(
        std::iter::once("medadapt").chain(args.iter().copied()),
        &mut Io {
            out: &mut out,
            err: &mut err,
        },
        backend,
    );
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

/// Relative path to file bytes for everything under `dir`.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn mortality_mock() -> Arc<MockBackend> {
    Arc::new(MockBackend::new(MockScript::load(&fixture("hospital_mortality_mock.toml")).unwrap()))
}

/// Four labeled PubMedQA-format records.
fn write_pqal(dir: &Path) -> PathBuf {
    let body = serde_json::json!({
        "101": {"QUESTION": "Is A linked to B?", "CONTEXTS": ["One two three."], "LONG_ANSWER": "Yes.", "final_decision": "yes"},
        "102": {"QUESTION": "Does C cause D?", "CONTEXTS": ["Four five."], "LONG_ANSWER": "No.", "final_decision": "no"},
        "103": {"QUESTION": "Might E help?", "CONTEXTS": ["Six."], "LONG_ANSWER": "Unclear.", "final_decision": "maybe"},
        "104": {"QUESTION": "Is F safe?", "CONTEXTS": ["Seven eight."], "LONG_ANSWER": "Yes.", "final_decision": "yes"},
    });
    let p = dir.join("pqal.json");
    fs::write(&p, body.to_string()).unwrap();
    p
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_medadapt");
    let none = Command::new(bin).output().unwrap();
    assert_eq!(none.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&none.stderr);
    assert_eq!(stderr.lines().last(), Some("error[usage]: no subcommand given"));

    let bad = Command::new(bin).args(["emit-recipe", "--stage", "pretraining"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stderr).starts_with("error[validation]"));

    let ok = Command::new(bin).args(["emit-recipe", "--stage", "task_adaptation"]).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("learning_rate = 0.00005"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&[], None).0, 2);
    assert_eq!(run(&["stats", "--no-such-flag"], None).0, 2);
    assert_eq!(run(&["cpoly-check", "--mode", "sideways"], None).0, 2);
    let (code, out, _) = run(&["--help"], None);
    assert_eq!(code, 0);
    assert!(out.contains("voc-run"));
}

#[test]
fn sampling_commands_need_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_pqal(dir.path());
    let out = dir.path().join("out");
    let (code, _, err) = run(
        &["split", "--input", input.to_str().unwrap(), "--fractions", "0.5,0.5", "--out", out.to_str().unwrap()],
        None,
    );
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("seed"));
    let seqs = dir.path().join("seqs.txt");
    fs::write(&seqs, "1 2 3 4 5 6 7 8 9 10 11 12 13 14 15 16 17 18 19 20\n").unwrap();
    let (code, _, _) = run(&["prep-glm", "--input", seqs.to_str().unwrap(), "--vocab-size", "100"], None);
    assert_eq!(code, 3);
    assert!(!out.exists());
}

#[test]
fn stats_reports_label_shares() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_pqal(dir.path());
    let (code, out, err) = run(&["stats", "--input", input.to_str().unwrap()], None);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("records: 4"), "{out}");
    assert!(out.contains("yes: 50.0%") && out.contains("no: 25.0%") && out.contains("maybe: 25.0%"), "{out}");
    let (_, json, _) = run(&["stats", "--input", input.to_str().unwrap(), "--json"], None);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["record_count"], 4);
}

#[test]
fn dry_run_writes_nothing_and_calls_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_pqal(dir.path());
    let seqs = dir.path().join("seqs.txt");
    fs::write(&seqs, "1 2 3 4 5 6 7 8 9 10 11 12 13 14 15 16 17 18 19 20\n").unwrap();
    let pqau = dir.path().join("pqau.json");
    fs::write(
        &pqau,
        r#"{"900": {"QUESTION": "Is G useful?", "CONTEXTS": ["Nine."], "LONG_ANSWER": "G helped."}}"#,
    )
    .unwrap();
    let before = snapshot(dir.path());
    let out = dir.path().join("out");
    let o = out.to_str().unwrap();
    let i = input.to_str().unwrap();
    let mock = mortality_mock();
    let hm_path = fixture("hospital_mortality.jsonl");
    let hm = hm_path.to_str().unwrap();
    let commands: Vec<Vec<&str>> = vec![
        vec!["ingest", "--input", i, "--output", o],
        vec!["split", "--input", i, "--fractions", "0.5,0.5", "--seed", "1", "--out", o],
        vec!["prep-glm", "--input", seqs.to_str().unwrap(), "--vocab-size", "100", "--seed", "1", "--output", o],
        vec!["voc-run", "--input", hm, "--out", o],
        vec!["annotate", "--input", pqau.to_str().unwrap(), "--subset", "PQA-U", "--out", o],
        vec!["cpoly-check", "--save", o],
        vec!["emit-recipe", "--stage", "knowledge_injection", "--output", o],
        vec!["report", "--kind", "stages", "--output", o],
    ];
    for args in commands {
        let mut full = vec!["--dry-run"];
        full.extend(&args);
        let (code, stdout, err) = run(&full, Some(mock.clone()));
        assert_eq!(code, 0, "{args:?}: {err}");
        assert!(stdout.contains("dry run") || args[0] == "cpoly-check", "{args:?}: {stdout}");
    }
    assert_eq!(snapshot(dir.path()), before);
    assert_eq!(mock.calls(), 0);
}

#[test]
fn same_seed_gives_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_pqal(dir.path());
    let seqs = dir.path().join("seqs.txt");
    let lines: Vec<String> = (0..20)
        .map(|i| (0..40 + i).map(|t| ((t * 7 + i) % 97).to_string()).collect::<Vec<_>>().join(" "))
        .collect();
    fs::write(&seqs, lines.join("\n")).unwrap();
    let outputs = |name: &str| {
        let out = dir.path().join(name);
        let o = out.to_str().unwrap();
        let glm_out = format!("{o}/glm.jsonl");
        let hm_path = fixture("hospital_mortality.jsonl");
        let hm = hm_path.to_str().unwrap();
        let steps: [Vec<&str>; 4] = [
            vec!["split", "--input", input.to_str().unwrap(), "--fractions", "0.5,0.25,0.25", "--seed", "9", "--out", o],
            vec!["prep-glm", "--input", seqs.to_str().unwrap(), "--vocab-size", "100", "--seed", "9", "--output", &glm_out],
            vec!["voc-run", "--input", hm, "--out", o],
            vec!["cpoly-check", "--seed", "9", "--save", o],
        ];
        for args in steps {
            let (code, _, err) = run(&args, Some(mortality_mock()));
            assert_eq!(code, 0, "{args:?}: {err}");
        }
        snapshot(&out)
    };
    let first = outputs("a");
    assert!(first.len() >= 7, "{:?}", first.keys());
    assert_eq!(first, outputs("b"));
}

#[test]
fn voc_run_through_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::copy(fixture("hospital_mortality_mock.toml"), dir.path().join("mock.toml")).unwrap();
    fs::copy(fixture("hospital_mortality.jsonl"), dir.path().join("data.jsonl")).unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "seed = 1\n[backend]\nmock = \"mock.toml\"\n[paths]\ndata_in = \"data.jsonl\"\ndata_out = \"out\"\n",
    )
    .unwrap();
    let (code, out, err) = run(&["--config", cfg.to_str().unwrap(), "voc-run"], None);
    assert_eq!(code, 0, "{err}");
    assert!(!out.is_empty());
    let preds = fs::read_to_string(dir.path().join("out/predictions.jsonl")).unwrap();
    assert_eq!(preds.trim(), r#"{"id":"hospital-mortality-30d","label":"A"}"#);
}

#[test]
fn bad_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[backend]\nendpoint = \"http://localhost:1\"\n").unwrap();
    let (code, _, err) = run(&["--config", cfg.to_str().unwrap(), "emit-recipe", "--stage", "task_adaptation"], None);
    assert_eq!(code, 3);
    assert!(err.starts_with("error[validation]") && err.contains("model"), "{err}");
    let (code, _, _) = run(&["--config", "/nonexistent/run.toml", "emit-recipe", "--stage", "task_adaptation"], None);
    assert_eq!(code, 3);
}

#[test]
fn backend_failure_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let mock = Arc::new(MockBackend::new(MockScript::load(&fixture("hospital_mortality_mock.toml")).unwrap()).failing_after(1));
    let (code, _, err) = run(
        &[
            "voc-run",
            "--input",
            fixture("hospital_mortality.jsonl").to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ],
        Some(mock),
    );
    assert_eq!(code, 1, "{err}");
    assert!(err.starts_with("error[runtime]"), "{err}");
}

#[test]
fn score_and_missing_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_pqal(dir.path());
    let gold = dir.path().join("gold.jsonl");
    assert_eq!(run(&["ingest", "--input", input.to_str().unwrap(), "--output", gold.to_str().unwrap()], None).0, 0);
    let preds = dir.path().join("preds.jsonl");
    fs::write(&preds, "{\"id\":\"101\",\"label\":\"yes\"}\n{\"id\":\"102\",\"label\":\"A\"}\n{\"id\":\"103\",\"label\":\"maybe\"}\n").unwrap();
    let args = ["score", "--predictions", preds.to_str().unwrap(), "--gold", gold.to_str().unwrap()];
    let (code, _, err) = run(&args, None);
    assert_eq!(code, 3, "missing prediction for 104 should fail: {err}");
    let summary = dir.path().join("summary.json");
    let mut lenient = args.to_vec();
    lenient.extend(["--count-missing-wrong", "--summary", summary.to_str().unwrap()]);
    let (code, out, err) = run(&lenient, None);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("accuracy"), "{out}");
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(summary).unwrap()).unwrap();
    assert_eq!(v["accuracy"], 0.5);
    assert_eq!(v["n"], 4);
}

#[test]
fn reports_render() {
    let (code, out, _) = run(&["report", "--kind", "stages"], None);
    assert_eq!(code, 0);
    assert!(out.contains("57.2%") && out.contains("80.6%") && out.contains("+23.4"), "{out}");
    let (code, out, _) = run(&["report", "--kind", "leaderboard", "--accuracy", "0.79", "--name", "ours"], None);
    assert_eq!(code, 0);
    assert!(out.contains("ours") && out.contains("measured") && out.contains("AntGLM-Med"), "{out}");
}

#[test]
fn cpoly_check_passes_with_defaults() {
    for mode in ["direct", "eval", "train"] {
        let (code, out, err) = run(&["cpoly-check", "--mode", mode], None);
        assert_eq!(code, 0, "{mode}: {err}");
        let line = out.lines().find(|l| l.starts_with("max gradient error:")).unwrap();
        let v: f64 = line["max gradient error:".len()..].trim().parse().unwrap();
        assert!(v <= 1e-4, "{mode}: {v}");
    }
}

#[test]
fn merge_rejects_overlapping_ids() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_pqal(dir.path());
    let labeled = dir.path().join("labeled.jsonl");
    assert_eq!(run(&["ingest", "--input", input.to_str().unwrap(), "--output", labeled.to_str().unwrap()], None).0, 0);
    let merged = dir.path().join("merged.jsonl");
    let (code, _, err) = run(
        &["merge", "--labeled", labeled.to_str().unwrap(), "--pseudo", labeled.to_str().unwrap(), "--output", merged.to_str().unwrap()],
        None,
    );
    assert_ne!(code, 0);
    assert!(err.contains("101"), "{err}");
    assert!(!merged.exists());
}
