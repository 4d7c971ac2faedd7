use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde_json::json;
use threadweave::io::{load_corpus, load_model, read_registry, read_threads, save_model};
use threadweave::Error;
use threadweave_core::corpus::{TaskRegistry, EOS};
use threadweave_core::encoders::Dims;
use threadweave_core::synthgen::{generate, DomainSynth, SynthConfig};
use threadweave_core::trainer::{train, TrainConfig};

fn write_lines(path: &Path, lines: &[serde_json::Value]) {
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    fs::write(path, text).unwrap();
}

fn email(id: &str, n_messages: usize, n_tokens: usize) -> serde_json::Value {
    let messages: Vec<_> = (0..n_messages)
        .map(|i| {
            json!({
                "tokens": (0..n_tokens).map(|j| format!("w{}", (i + j) % 7)).collect::<Vec<_>>(),
                "meta": {"has_attachment": i % 3 == 0}
            })
        })
        .collect();
    json!({"thread_id": id, "domain": "E", "messages": messages})
}

#[test]
fn truncation_and_derived_labels() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.jsonl");
    write_lines(&p, &[email("a", 40, 5), email("b", 3, 300)]);
    let threads = read_threads(&p, &TaskRegistry::standard()).unwrap();
    assert_eq!(threads[0].messages.len(), 32);
    let long = &threads[1].messages[0].tokens;
    assert_eq!(long.len(), 256);
    assert_eq!(long.last().unwrap(), EOS);
    assert_eq!(long[1], "w0");
    assert_eq!(long[254], format!("w{}", 253 % 7));
    let et: Vec<&str> = threads[1].messages.iter().map(|m| m.labels["E-T"].as_str()).collect();
    assert_eq!(et, ["0", "0", "1"]);
    assert_eq!(threads[1].messages[0].labels["E-A"], "1");
}

#[test]
fn irc_turn_labels_follow_speakers() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.jsonl");
    let messages: Vec<_> = ["a", "a", "b", "a"]
        .iter()
        .map(|s| json!({"tokens": ["x"], "meta": {"speaker_id": s}}))
        .collect();
    write_lines(&p, &[json!({"thread_id": "t", "domain": "I", "messages": messages})]);
    let t = &read_threads(&p, &TaskRegistry::standard()).unwrap()[0];
    let it: Vec<&str> = t.messages.iter().map(|m| m.labels["I-T"].as_str()).collect();
    assert_eq!(it, ["0", "0", "1", "1"]);
}

fn load_err(lines: &[serde_json::Value]) -> Error {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.jsonl");
    write_lines(&p, lines);
    read_threads(&p, &TaskRegistry::standard()).unwrap_err()
}

#[test]
fn malformed_records_report_their_line() {
    let empty = json!({"thread_id": "e", "domain": "E", "messages": []});
    match load_err(&[email("a", 2, 3), empty]) {
        Error::Parse { line, .. } => assert_eq!(line, 2),
        e => panic!("{e}"),
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.jsonl");
    fs::write(&p, "{\"thread_id\": 1}\n").unwrap();
    let e = read_threads(&p, &TaskRegistry::standard()).unwrap_err();
    assert!(matches!(e, Error::Parse { line: 1, .. }));
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn unknown_domains_tasks_and_labels_are_rejected() {
    let unknown_domain = json!({"thread_id": "x", "domain": "Q", "messages": [{"tokens": ["a"]}]});
    assert!(load_err(&[unknown_domain]).to_string().contains("unknown domain"));
    let unknown_task = json!({"thread_id": "x", "domain": "R", "messages": [{"tokens": ["a"], "labels": {"R-T": "1", "Z": "1"}}]});
    assert!(load_err(&[unknown_task]).to_string().contains("unknown task"));
    let bad_label = json!({"thread_id": "x", "domain": "R", "messages": [{"tokens": ["a"], "labels": {"R-T": "2"}}]});
    assert!(load_err(&[bad_label]).to_string().contains("label set"));
    let missing_meta = json!({"thread_id": "x", "domain": "I", "messages": [{"tokens": ["a"]}]});
    assert!(load_err(&[missing_meta]).to_string().contains("speaker_id"));
}

#[test]
fn registry_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("tasks.json");
    fs::write(&p, serde_json::to_string(&TaskRegistry::standard()).unwrap()).unwrap();
    assert_eq!(read_registry(&p).unwrap(), TaskRegistry::standard());
    fs::write(&p, r#"[{"task_id": "A", "domain": "E", "labels": ["x"]}]"#).unwrap();
    assert!(read_registry(&p).is_err());
}

fn synth_file(dir: &Path, n: usize) -> std::path::PathBuf {
    let cfg = SynthConfig {
        seed: 5,
        domains: ["E", "I", "R"]
            .iter()
            .map(|d| DomainSynth {
                id: d.to_string(),
                n_threads: n,
                n_domain_words: 20,
                act_transition: None,
            })
            .collect(),
        ..SynthConfig::default()
    };
    let threads = generate(&cfg).unwrap().threads;
    let p = dir.join("synth.jsonl");
    threadweave::io::write_jsonl(&p, &threads).unwrap();
    p
}

#[test]
fn splits_are_deterministic_disjoint_and_order_free() {
    let dir = tempfile::tempdir().unwrap();
    let p = synth_file(dir.path(), 21);
    let reg = TaskRegistry::standard();
    let a = load_corpus(&p, &reg, 9).unwrap();
    assert_eq!(a, load_corpus(&p, &reg, 9).unwrap());
    let text = fs::read_to_string(&p).unwrap();
    let reversed: String = text.lines().rev().map(|l| format!("{l}\n")).collect();
    let q = dir.path().join("rev.jsonl");
    fs::write(&q, reversed).unwrap();
    assert_eq!(a, load_corpus(&q, &reg, 9).unwrap());
    for s in a.domains.values() {
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (11, 5, 5));
        let ids: BTreeSet<&str> = s.train.iter().chain(&s.valid).chain(&s.test).map(|t| t.thread_id.as_str()).collect();
        assert_eq!(ids.len(), 21);
    }
}

#[test]
fn preprocessing_written_corpus_again_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.jsonl");
    write_lines(&p, &[email("a", 40, 300)]);
    let once = read_threads(&p, &TaskRegistry::standard()).unwrap();
    let q = dir.path().join("d.jsonl");
    threadweave::io::write_jsonl(&q, &once).unwrap();
    assert_eq!(once, read_threads(&q, &TaskRegistry::standard()).unwrap());
}

fn small_model(dir: &Path) -> threadweave_core::trainer::TrainedModel {
    let p = synth_file(dir, 16);
    let reg = TaskRegistry::standard();
    let corpus = load_corpus(&p, &reg, 1).unwrap();
    let cfg = TrainConfig {
        dims: Dims::uniform(4, 2),
        max_epochs: 2,
        seed: 1,
        ..TrainConfig::default()
    };
    train(&corpus, &reg, &cfg, &mut ()).unwrap()
}

#[test]
fn model_artifact_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_model(dir.path());
    let p = dir.path().join("m.json");
    save_model(&p, &m).unwrap();
    let back = load_model(&p).unwrap();
    assert_eq!(back, m);
    for (a, b) in m.params.iter().zip(&back.params) {
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", a.name);
    }
    let q = dir.path().join("m2.json");
    save_model(&q, &back).unwrap();
    assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
}

#[test]
fn wrong_version_and_tampered_arrays_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_model(dir.path());
    let p = dir.path().join("m.json");
    let mut v = serde_json::to_value(&m).unwrap();
    v["format_version"] = json!(99);
    fs::write(&p, v.to_string()).unwrap();
    let e = load_model(&p).unwrap_err();
    assert!(e.to_string().contains("version 99"), "{e}");

    let mut v = serde_json::to_value(&m).unwrap();
    let name = v["params"][0]["name"].as_str().unwrap().to_string();
    v["params"][0]["data"].as_array_mut().unwrap().pop();
    fs::write(&p, v.to_string()).unwrap();
    let e = load_model(&p).unwrap_err();
    assert!(e.to_string().contains(&name), "{e}");
}
