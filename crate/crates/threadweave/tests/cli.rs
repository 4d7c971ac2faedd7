use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn tw(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_threadweave"))
        .args(args)
        .current_dir(dir)
        .env("THREADWEAVE_LOG", "error")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: &str = r#"{
  "dims": {"word": 6, "message": 6, "hidden": 6, "task": 3},
  "max_epochs": 2,
  "synth": {"domains": [
    {"id": "E", "n_threads": 24, "n_domain_words": 20},
    {"id": "I", "n_threads": 24, "n_domain_words": 20},
    {"id": "R", "n_threads": 24, "n_domain_words": 20}
  ]},
  "cv": {"n_outer": 4}
}"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), SMALL).unwrap();
    let o = tw(dir.path(), &["synth", "--config", "cfg.json", "--seed", "2", "--out", "s"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn train_then_eval_reports_every_task() {
    let dir = setup();
    let d = dir.path();
    let o = tw(d, &["train", "--config", "cfg.json", "--strategy", "add", "--domains", "E,I,R", "--corpus", "s/corpus.jsonl", "--out", "m"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.is_empty());
    let log = fs::read_to_string(d.join("m/epochs.jsonl")).unwrap();
    for line in log.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["wall_ms"].is_u64() && v["valid_mace"]["I-T"].is_f64());
    }
    let o = tw(d, &["eval", "--model", "m/model.json", "--corpus", "s/corpus.jsonl", "--out", "ev"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&d.join("ev/eval.json"));
    let tasks = report["tasks"].as_object().unwrap();
    assert_eq!(tasks.keys().collect::<Vec<_>>(), ["E-A", "E-T", "I-T", "R-T"]);
    for t in tasks.values() {
        assert!(t["mace"].is_f64() && t["accuracy"].is_f64());
    }
    assert_eq!(report["echo"]["seed"], 0);
    assert_eq!(report["echo"]["config"]["strategy"], "add");
    assert!(fs::read_to_string(d.join("ev/eval.txt")).unwrap().contains("I-T MACE"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = setup();
    let d = dir.path();
    let o = tw(d, &["train", "--config", "cfg.json", "--strategy", "tied", "--domains", "I", "--seed", "4", "--corpus", "s/corpus.jsonl", "--out", "m"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(&d.join("m/model.json"));
    assert_eq!(m["strategy"], "tied");
    assert_eq!(m["config"]["domains"], serde_json::json!(["I"]));
    assert_eq!(m["seed"], 4);
    assert_eq!(m["config"]["dims"]["hidden"], 6);
    assert_eq!(m["config"]["max_epochs"], 2);
}

#[test]
fn gradcheck_passes_for_addmul() {
    let dir = tempfile::tempdir().unwrap();
    let o = tw(dir.path(), &["gradcheck", "--dims", "4", "--vocab", "20", "--strategy", "addmul", "--out", "g"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&dir.path().join("g/gradcheck.json"));
    assert_eq!(r["passed"], true);
    assert!(r["strategies"]["addmul"]["max_rel_err"].as_f64().unwrap() < 1e-4);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = tw(dir.path(), &["train", "--strategy", "shared", "--corpus", "x", "--out", "y"]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    for s in ["tied", "disjoint", "add", "addmul", "affine", "malopa", "feda"] {
        assert!(err.contains(s), "{err}");
    }
    assert_eq!(code(&tw(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&tw(dir.path(), &["--help"])), 0);
    assert!(!dir.path().join("y").exists());
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.jsonl"), "{\"thread_id\": \"a\", \"domain\": \"E\", \"messages\": []}\n").unwrap();
    let o = tw(d, &["train", "--corpus", "bad.jsonl", "--out", "m"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.jsonl:1"));
    assert_eq!(code(&tw(d, &["train", "--corpus", "missing.jsonl", "--out", "m"])), 2);
}

#[test]
fn embed_and_downstream_pipeline() {
    let dir = setup();
    let d = dir.path();
    for (strategy, domains, out) in [("add", "E+I", "m1"), ("tied", "E", "m2")] {
        let o = tw(d, &["train", "--config", "cfg.json", "--strategy", strategy, "--domains", domains, "--corpus", "s/corpus.jsonl", "--out", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let f = format!("f{out}");
        let o = tw(d, &["embed", "--model", &format!("{out}/model.json"), "--corpus", "s/corpus.jsonl", "--out", &f]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let args = |jobs: &'static str, out: &'static str| {
        vec!["downstream", "--config", "cfg.json", "--features", "fm1/features.jsonl", "--features", "fm2/features.jsonl", "--jobs", jobs, "--out", out]
    };
    assert_eq!(code(&tw(d, &args("1", "d1"))), 0);
    assert_eq!(code(&tw(d, &args("3", "d3"))), 0);
    let a = fs::read(d.join("d1/downstream.json")).unwrap();
    assert_eq!(a, fs::read(d.join("d3/downstream.json")).unwrap());
    let r = json(&d.join("d1/downstream.json"));
    assert_eq!(r["report"]["systems"]["add"]["f1_per_split"].as_array().unwrap().len(), 4);
    assert!(r["report"]["p_values"]["add"]["tied"]["p_value"].is_f64());
    assert!(fs::read_to_string(d.join("d1/downstream.txt")).unwrap().contains("p = "));
}

#[test]
fn agreement_reports_kappa() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let a: String = (0..100).map(|i| if i < 50 { "Reply-Yesno\n" } else { "Other\n" }).collect();
    let b: String = (0..100)
        .map(|i| if (i < 40) || (50..60).contains(&i) { "Reply-Yesno\n" } else { "Other\n" })
        .collect();
    fs::write(d.join("a.txt"), a).unwrap();
    fs::write(d.join("b.txt"), b).unwrap();
    let o = tw(d, &["agreement", "a.txt", "b.txt", "--out", "k"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&d.join("k/agreement.json"));
    assert!((r["kappa"].as_f64().unwrap() - 0.6).abs() < 1e-12);
    fs::write(d.join("c.txt"), "Maybe\n").unwrap();
    assert_eq!(code(&tw(d, &["agreement", "a.txt", "c.txt", "--out", "k2"])), 2);
}

#[test]
fn outputs_stay_inside_out_dir() {
    let dir = setup();
    let d = dir.path();
    let before: Vec<_> = fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name()).collect();
    let o = tw(d, &["train", "--config", "cfg.json", "--corpus", "s/corpus.jsonl", "--out", "nested/m"]);
    assert_eq!(code(&o), 0);
    let mut after: Vec<_> = fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name()).collect();
    after.retain(|n| n != "nested");
    assert_eq!(before.len(), after.len());
    let inside: Vec<_> = fs::read_dir(d.join("nested/m")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(inside.len(), 2);
}
