use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use threadweave_core::corpus::{Message, MessageMeta, TaskSpec, Thread, Vocabulary};
use threadweave_core::downstream::{
    check_inputs, embed_corpus, logistic_fit, nested_cv, outer_split, run_outer_split, CvData, DownstreamError, EmbeddedExample, FeatureSet,
    NestedCvConfig, System,
};
use threadweave_core::encoders::Dims;
use threadweave_core::model::{Model, ModelConfig};
use threadweave_core::reparam::Strategy;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Binary logistic regression by Newton's method on `(beta, beta0)` with
/// penalty `||beta||^2 / (4C)`, the binary form of the two-class softmax
/// objective with its symmetric parametrization.
fn newton_binary(x: &[Vec<f64>], y: &[usize], c: f64) -> (Vec<f64>, f64) {
    let d = x[0].len();
    let mut theta = vec![0.0; d + 1];
    for _ in 0..100 {
        let mut g = vec![0.0; d + 1];
        let mut h = vec![vec![0.0; d + 1]; d + 1];
        for (xi, &yi) in x.iter().zip(y) {
            let mut z = theta[d];
            for j in 0..d {
                z += theta[j] * xi[j];
            }
            let p = sigmoid(z);
            let r = p - yi as f64;
            let aug: Vec<f64> = xi.iter().copied().chain([1.0]).collect();
            for a in 0..=d {
                g[a] += r * aug[a];
                for b in 0..=d {
                    h[a][b] += p * (1.0 - p) * aug[a] * aug[b];
                }
            }
        }
        for j in 0..d {
            g[j] += theta[j] / (2.0 * c);
            h[j][j] += 1.0 / (2.0 * c);
        }
        let step = solve(h, g);
        for (t, s) in theta.iter_mut().zip(&step) {
            *t -= s;
        }
        if step.iter().map(|s| s.abs()).fold(0.0, f64::max) < 1e-14 {
            break;
        }
    }
    let beta0 = theta.pop().unwrap();
    (theta, beta0)
}

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for k in col..n {
                    a[r][k] -= f * a[col][k];
                }
                b[r] -= f * b[col];
            }
        }
    }
    (0..n).map(|i| b[i] / a[i][i]).collect()
}

#[test]
fn logistic_fit_matches_newton_oracle() {
    let x = vec![vec![0.0, 1.0], vec![1.0, 0.5], vec![2.0, -0.5], vec![0.5, 0.0]];
    let y = vec![0, 0, 1, 1];
    for c in [0.1, 1.0, 10.0] {
        let m = logistic_fit(&x, &y, 2, c).unwrap();
        let (beta, beta0) = newton_binary(&x, &y, c);
        for j in 0..2 {
            assert!((m.weight(1, j) - beta[j] / 2.0).abs() < 1e-4, "C={c}");
            assert!((m.weight(0, j) + beta[j] / 2.0).abs() < 1e-4, "C={c}");
        }
        assert!((m.bias(1) - m.bias(0) - beta0).abs() < 1e-4);
    }
}

#[test]
fn logistic_fit_is_deterministic_and_validates_input() {
    let x = vec![vec![1.0], vec![-1.0], vec![0.3]];
    let y = vec![1, 0, 2];
    assert_eq!(logistic_fit(&x, &y, 3, 1.0).unwrap(), logistic_fit(&x, &y, 3, 1.0).unwrap());
    assert!(matches!(logistic_fit(&x, &[0, 1], 3, 1.0), Err(DownstreamError::LengthMismatch(..))));
    assert!(matches!(logistic_fit(&[vec![1.0], vec![1.0, 2.0]], &[0, 1], 2, 1.0), Err(DownstreamError::Dimension { .. })));
    assert!(matches!(logistic_fit(&x, &[0, 1, 5], 3, 1.0), Err(DownstreamError::LabelOutOfRange { .. })));
}

/// `n_threads` threads of 2..5 messages with balanced labels over `k`
/// classes.
fn synthetic_examples(n_threads: usize, k: usize, seed: u64) -> (CvData, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut c = 0;
    for t in 0..n_threads {
        for _ in 0..rng.random_range(2..5) {
            ids.push(format!("t{t:03}"));
            labels.push(c % k);
            c += 1;
        }
    }
    let names = (0..k).map(|i| format!("L{i}")).collect();
    (
        CvData {
            thread_ids: ids,
            labels: labels.clone(),
            label_names: names,
        },
        labels,
    )
}

fn one_hot(labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    labels.iter().map(|&y| (0..k).map(|j| f64::from(u8::from(j == y))).collect()).collect()
}

fn system(name: &str, features: Vec<Vec<f64>>) -> System {
    System {
        name: name.into(),
        candidates: vec![FeatureSet {
            setting: "E".into(),
            features,
        }],
    }
}

fn small_cfg(n_outer: usize) -> NestedCvConfig {
    NestedCvConfig {
        n_outer,
        seed: 5,
        ..NestedCvConfig::default()
    }
}

#[test]
fn one_hot_features_score_perfectly() {
    let (data, labels) = synthetic_examples(30, 5, 1);
    let f = one_hot(&labels, 5);
    let systems = [system("a", f.clone()), system("b", f)];
    let report = nested_cv(&data, &systems, &small_cfg(6)).unwrap();
    for s in report.systems.values() {
        assert_eq!(s.mean_f1, 100.0);
        assert!(s.f1_per_split.iter().all(|v| *v == 100.0));
    }
    assert_eq!(report.p_values["a"]["b"].p_value, 1.0);
}

#[test]
fn random_features_score_near_chance() {
    let (data, _) = synthetic_examples(40, 5, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f: Vec<Vec<f64>> = data.labels.iter().map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let report = nested_cv(&data, &[system("noise", f)], &small_cfg(8)).unwrap();
    let m = report.systems["noise"].mean_f1;
    assert!((8.0..35.0).contains(&m), "{m}");
}

#[test]
fn outer_splits_keep_threads_whole() {
    let (data, _) = synthetic_examples(25, 3, 4);
    let cfg = small_cfg(120);
    for i in 0..cfg.n_outer {
        let s = outer_split(&data, &cfg, i).unwrap();
        assert_eq!(s.train_threads.len() + s.test_threads.len(), 25);
        assert_eq!(s.train_threads.len(), 17);
        assert!(s.train_threads.iter().all(|t| !s.test_threads.contains(t)));
    }
    assert_ne!(outer_split(&data, &cfg, 0).unwrap(), outer_split(&data, &cfg, 1).unwrap());
}

#[test]
fn outer_test_labels_never_influence_selection() {
    let (data, labels) = synthetic_examples(24, 3, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noisy: Vec<Vec<f64>> = one_hot(&labels, 3)
        .into_iter()
        .map(|v| v.into_iter().map(|x| x + rng.random_range(-0.8..0.8)).collect())
        .collect();
    let systems = [System {
        name: "s".into(),
        candidates: vec![
            FeatureSet {
                setting: "E".into(),
                features: noisy.clone(),
            },
            FeatureSet {
                setting: "E+I".into(),
                features: noisy.iter().map(|v| v.iter().map(|x| x * 0.5).collect()).collect(),
            },
        ],
    }];
    let cfg = small_cfg(4);
    for i in 0..cfg.n_outer {
        let clean = run_outer_split(&data, &systems, &cfg, i).unwrap();
        let mut corrupted = data.clone();
        for (j, t) in data.thread_ids.iter().enumerate() {
            if clean.split.test_threads.contains(t) {
                corrupted.labels[j] = (corrupted.labels[j] + 1) % 3;
            }
        }
        let dirty = run_outer_split(&corrupted, &systems, &cfg, i).unwrap();
        assert_eq!(clean.selections, dirty.selections);
        assert_eq!(clean.split, dirty.split);
    }
}

#[test]
fn nested_cv_is_deterministic() {
    let (data, labels) = synthetic_examples(20, 3, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let f: Vec<Vec<f64>> = one_hot(&labels, 3)
        .into_iter()
        .map(|v| v.into_iter().map(|x| x + rng.random_range(-1.0..1.0)).collect())
        .collect();
    let systems = [system("x", f)];
    assert_eq!(nested_cv(&data, &systems, &small_cfg(3)).unwrap(), nested_cv(&data, &systems, &small_cfg(3)).unwrap());
}

#[test]
fn mismatched_features_are_rejected() {
    let (data, labels) = synthetic_examples(10, 2, 1);
    let mut f = one_hot(&labels, 2);
    f.pop();
    assert!(check_inputs(&data, &[system("s", f)], &small_cfg(2)).is_err());
    let bad = NestedCvConfig {
        c_grid: vec![0.0],
        ..small_cfg(2)
    };
    assert!(check_inputs(&data, &[system("s", one_hot(&labels, 2))], &bad).is_err());
}

#[test]
fn label_ids_follow_sorted_names() {
    let ex = |t: &str, l: &str| EmbeddedExample {
        thread_id: t.into(),
        index: 0,
        features: vec![0.0],
        label: l.into(),
    };
    let data = CvData::from_examples(&[ex("a", "inform"), ex("a", "ack"), ex("b", "request")]);
    assert_eq!(data.label_names, vec!["ack", "inform", "request"]);
    assert_eq!(data.labels, vec![1, 0, 2]);
}

fn act_thread(id: &str, tokens: &[&[&str]], acts: &[&str]) -> Thread {
    Thread {
        thread_id: id.into(),
        domain: "E".into(),
        messages: tokens
            .iter()
            .zip(acts)
            .map(|(t, a)| Message {
                tokens: t.iter().map(|s| s.to_string()).collect(),
                labels: Default::default(),
                meta: MessageMeta {
                    act: Some(a.to_string()),
                    ..Default::default()
                },
            })
            .collect(),
    }
}

fn tiny_model(dim: usize, strategy: Strategy, vocab: usize) -> Model {
    let cfg = ModelConfig {
        strategy,
        dims: Dims::uniform(dim, 2),
        use_attention: true,
        use_recurrence: true,
        vocab_size: vocab,
        domains: vec!["E".into()],
        tasks: vec![TaskSpec::binary("E-T", "E")],
    };
    Model::new(cfg, 3).unwrap()
}

#[test]
fn embeddings_are_deterministic_and_causal() {
    let vocab = Vocabulary::from(["<unk>", "a", "b", "c"].iter().map(|s| s.to_string()).collect::<Vec<_>>());
    let model = tiny_model(4, Strategy::Add, vocab.len());
    let full = act_thread("t", &[&["a", "b"], &["c"], &["zzz", "a"]], &["request", "inform", "ack"]);
    let cut = act_thread("t", &[&["a", "b"], &["c"]], &["request", "inform"]);
    let a = embed_corpus(&model, &vocab, [&full], 0, "act").unwrap();
    let b = embed_corpus(&model, &vocab, [&full], 0, "act").unwrap();
    assert_eq!(a, b);
    let c = embed_corpus(&model, &vocab, [&cut], 0, "act").unwrap();
    assert_eq!(&a[..2], &c[..]);
    assert_eq!(a[2].label, "ack");
    assert_eq!(a.len(), 3);
}

#[test]
fn one_message_embedding_matches_hand_computation() {
    let vocab = Vocabulary::from(vec!["<unk>".to_string(), "w".to_string()]);
    let mut m = tiny_model(1, Strategy::Tied, 2);
    let set = |m: &mut Model, n: &str, v: &[f64]| m.params.by_name_mut(n).unwrap().data_mut().copy_from_slice(v);
    set(&mut m, "emb", &[0.0, 0.8]);
    set(&mut m, "msg/proj_w", &[1.5]);
    set(&mut m, "msg/proj_b", &[-0.2]);
    // gate blocks [w_x, w_h, b] in order input, output, forget, cell
    set(&mut m, "rnn/shared", &[0.4, 0.9, 0.1, -0.3, 0.2, 0.0, 0.6, -0.5, 1.0, 1.2, 0.3, -0.1]);
    let x = (1.5f64 * 0.8 - 0.2).tanh();
    let i = sigmoid(0.4 * x + 0.1);
    let o = sigmoid(-0.3 * x + 0.0);
    let g = (1.2 * x - 0.1).tanh();
    let e1 = o * (i * g).tanh();
    let t = act_thread("t", &[&["w"]], &["inform"]);
    let got = embed_corpus(&m, &vocab, [&t], 0, "act").unwrap();
    assert!((got[0].features[0] - e1).abs() < 1e-15);
}
