use threadweave_core::corpus::TaskSpec;
use threadweave_core::diff::Tensor;
use threadweave_core::encoders::Dims;
use threadweave_core::model::{Model, ModelConfig, ModelError};
use threadweave_core::reparam::Strategy;
use threadweave_core::trainer::{loss_and_gradients, micro_grad_check, micro_setup, EncodedThread};

fn set(model: &mut Model, name: &str, f: impl Fn(usize) -> f64) {
    let t = model.params.by_name_mut(name).unwrap_or_else(|| panic!("{name}"));
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

/// A model of `strategy` whose same-named parameters are copied from `src`.
fn transplant(src: &Model, strategy: Strategy, task_dim: usize) -> Model {
    let config = ModelConfig {
        strategy,
        dims: Dims {
            task: task_dim,
            ..src.config.dims
        },
        ..src.config.clone()
    };
    let mut m = Model::new(config, 0).unwrap();
    let names: Vec<String> = m.params.iter().map(|(_, p)| p.name.clone()).collect();
    for n in names {
        if let Some(v) = src.params.by_name(&n) {
            if v.shape() == m.params.by_name(&n).unwrap().shape() {
                *m.params.by_name_mut(&n).unwrap() = v.clone();
            }
        }
    }
    m
}

fn max_diff(a: &Model, b: &Model, threads: &[EncodedThread], tasks: &[usize]) -> f64 {
    let mut worst: f64 = 0.0;
    for t in threads {
        for &k in tasks {
            if t.labels[k].is_none() {
                continue;
            }
            let pa = a.embed(&t.tokens, k).unwrap();
            let pb = b.embed(&t.tokens, k).unwrap();
            for (x, y) in pa.iter().flatten().zip(pb.iter().flatten()) {
                worst = worst.max((x - y).abs());
            }
            let pa = a.predict(&t.tokens, k).unwrap();
            let pb = b.predict(&t.tokens, k).unwrap();
            for (x, y) in pa.iter().flatten().zip(pb.iter().flatten()) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    worst
}

const ALL_TASKS: [usize; 3] = [0, 1, 2];
const SEEDS: u64 = 100;

#[test]
fn gradients_match_finite_differences_for_every_strategy() {
    for s in Strategy::ALL {
        let r = micro_grad_check(s, 20, 4, 2, 7, 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{s}: max rel err {}", r.max_rel_err);
    }
}

#[test]
fn add_with_zero_domain_part_is_tied() {
    for seed in 0..SEEDS {
        let (mut add, threads) = micro_setup(Strategy::Add, 20, 4, 2, seed).unwrap();
        for d in ["E", "I"] {
            set(&mut add, &format!("rnn/add/{d}"), |_| 0.0);
        }
        let tied = transplant(&add, Strategy::Tied, 2);
        assert!(max_diff(&add, &tied, &threads, &ALL_TASKS) <= 1e-12);
    }
}

#[test]
fn add_with_zero_shared_part_is_per_domain_recurrence() {
    for seed in 0..SEEDS {
        let (mut add, threads) = micro_setup(Strategy::Add, 20, 4, 2, seed).unwrap();
        set(&mut add, "rnn/shared", |_| 0.0);
        for d in ["E", "I"] {
            set(&mut add, &format!("u/{d}"), |_| 0.0);
        }
        for (d, tasks) in [("E", &[0usize, 1][..]), ("I", &[2][..])] {
            let mut own = transplant(&add, Strategy::Tied, 2);
            *own.params.by_name_mut("rnn/shared").unwrap() = add.params.by_name(&format!("rnn/add/{d}")).unwrap().clone();
            assert!(max_diff(&add, &own, &threads, tasks) <= 1e-12);
        }
    }
}

#[test]
fn addmul_with_zero_domain_parts_is_tied() {
    for seed in 0..SEEDS {
        let (mut m, threads) = micro_setup(Strategy::AddMul, 20, 4, 2, seed).unwrap();
        for d in ["E", "I"] {
            set(&mut m, &format!("rnn/add/{d}"), |_| 0.0);
            set(&mut m, &format!("rnn/mul/{d}"), |_| 0.0);
        }
        let tied = transplant(&m, Strategy::Tied, 2);
        assert!(max_diff(&m, &tied, &threads, &ALL_TASKS) <= 1e-12);
    }
}

#[test]
fn affine_with_identity_map_is_add_with_unit_scale() {
    for seed in 0..SEEDS {
        let (mut add, threads) = micro_setup(Strategy::Add, 20, 4, 2, seed).unwrap();
        for d in ["E", "I"] {
            set(&mut add, &format!("u/{d}"), |_| 0.0);
        }
        let len = add.config.recurrent_layout().len();
        let mut affine = transplant(&add, Strategy::Affine, len);
        set(&mut affine, "rnn/affine", |i| if i / len == i % len { 1.0 } else { 0.0 });
        for d in ["E", "I"] {
            *affine.params.by_name_mut(&format!("rnn/emb/{d}")).unwrap() = add.params.by_name(&format!("rnn/add/{d}")).unwrap().clone();
        }
        assert!(max_diff(&add, &affine, &threads, &ALL_TASKS) <= 1e-12);
    }
}

#[test]
fn affine_with_zero_map_is_tied() {
    for seed in 0..SEEDS {
        let (mut m, threads) = micro_setup(Strategy::Affine, 20, 4, 2, seed).unwrap();
        set(&mut m, "rnn/affine", |_| 0.0);
        let tied = transplant(&m, Strategy::Tied, 2);
        assert!(max_diff(&m, &tied, &threads, &ALL_TASKS) <= 1e-12);
    }
}

#[test]
fn fresh_composed_models_start_at_tied() {
    for s in [Strategy::Add, Strategy::AddMul, Strategy::Affine] {
        let (_, threads) = micro_setup(s, 20, 4, 2, 3).unwrap();
        let m = Model::new(micro_setup(s, 20, 4, 2, 3).unwrap().0.config, 11).unwrap();
        let tied = transplant(&m, Strategy::Tied, 2);
        assert_eq!(max_diff(&m, &tied, &threads, &ALL_TASKS), 0.0, "{s}");
    }
}

#[test]
fn every_mandated_component_receives_gradient() {
    for s in Strategy::ALL {
        let (model, threads) = micro_setup(s, 20, 4, 2, 5).unwrap();
        let (_, grads) = loss_and_gradients(&model, &threads).unwrap();
        for (id, p) in model.params.iter() {
            if p.name == "emb" {
                continue;
            }
            let g = grads.get(id).unwrap_or_else(|| panic!("{s}: {} unreached", p.name));
            assert!(g.iter().any(|v| *v != 0.0), "{s}: {} has zero gradient", p.name);
        }
    }
}

#[test]
fn feda_with_silent_private_encoder_matches_shared_encoding() {
    let (mut feda, threads) = micro_setup(Strategy::Feda, 20, 4, 2, 9).unwrap();
    let h = feda.config.dims.message;
    for t in ["E-T", "E-A", "I-T"] {
        set(&mut feda, &format!("feda/{t}/msg/proj_w"), |_| 0.0);
        set(&mut feda, &format!("feda/{t}/msg/proj_b"), |_| 0.0);
        set(&mut feda, &format!("feda/{t}/mix_w"), |i| if i / (2 * h) == i % (2 * h) { 1.0 } else { 0.0 });
        set(&mut feda, &format!("feda/{t}/mix_b"), |_| 0.0);
    }
    let tied = transplant(&feda, Strategy::Tied, 2);
    assert!(max_diff(&feda, &tied, &threads, &ALL_TASKS) <= 1e-12);
}

#[test]
fn feda_private_parameters_are_task_local() {
    let (mut feda, threads) = micro_setup(Strategy::Feda, 20, 4, 2, 4).unwrap();
    let before = feda.predict(&threads[0].tokens, 1).unwrap();
    set(&mut feda, "feda/E-T/msg/proj_w", |i| i as f64 * 0.01);
    set(&mut feda, "feda/E-T/mix_b", |_| 0.7);
    let after = feda.predict(&threads[0].tokens, 1).unwrap();
    assert_eq!(before, after);
    assert_ne!(feda.predict(&threads[0].tokens, 0).unwrap(), transplant(&feda, Strategy::Tied, 2).predict(&threads[0].tokens, 0).unwrap());
}

#[test]
fn feda_hand_computed_mix() {
    use threadweave_core::diff::Tape;
    use threadweave_core::reparam::feda_mix;
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::vector(vec![0.5, -1.0])).unwrap();
    let p = tape.constant(Tensor::vector(vec![2.0, 1.0])).unwrap();
    let w = tape.constant(Tensor::matrix(2, 4, vec![1.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, -1.0]).unwrap()).unwrap();
    let b = tape.constant(Tensor::vector(vec![0.1, 0.2])).unwrap();
    let out = feda_mix(&mut tape, s, p, w, b).unwrap();
    // [0.5 + 2.0 + 0.1, -2.0 - 1.0 + 0.2]
    let got = tape.value(out).data();
    assert!((got[0] - 2.6).abs() < 1e-12 && (got[1] + 2.8).abs() < 1e-12, "{got:?}");
}

#[test]
fn disjoint_tasks_share_only_word_embeddings() {
    let (mut m, threads) = micro_setup(Strategy::Disjoint, 20, 4, 2, 2).unwrap();
    let before = m.predict(&threads[0].tokens, 1).unwrap();
    set(&mut m, "rnn/E-T", |_| 0.05);
    set(&mut m, "msg/E-T/proj_b", |_| 0.3);
    assert_eq!(before, m.predict(&threads[0].tokens, 1).unwrap());
    set(&mut m, "emb", |i| (i % 7) as f64 * 0.1);
    assert_ne!(before, m.predict(&threads[0].tokens, 1).unwrap());
}

#[test]
fn malopa_tasks_differ_only_through_task_embeddings() {
    let (mut m, threads) = micro_setup(Strategy::Malopa, 20, 4, 2, 6).unwrap();
    let k0 = m.params.by_name("malopa/E-T").unwrap().clone();
    *m.params.by_name_mut("malopa/E-A").unwrap() = k0;
    assert_eq!(m.embed(&threads[0].tokens, 0).unwrap(), m.embed(&threads[0].tokens, 1).unwrap());
}

#[test]
fn stored_parameters_must_match_the_layout() {
    let (m, _) = micro_setup(Strategy::Add, 20, 4, 2, 1).unwrap();
    let mut store = m.params.clone();
    store.insert("extra", Tensor::scalar(1.0)).unwrap();
    assert!(matches!(Model::from_params(m.config.clone(), store), Err(ModelError::Unexpected(n)) if n == "extra"));
    let tied = ModelConfig {
        strategy: Strategy::Tied,
        ..m.config.clone()
    };
    assert!(matches!(Model::from_params(tied.clone(), m.params.clone()), Err(ModelError::Unexpected(_))));
    let wide = ModelConfig {
        vocab_size: 21,
        ..m.config.clone()
    };
    assert!(matches!(Model::from_params(wide, m.params.clone()), Err(ModelError::ShapeMismatch { .. })));
}

#[test]
fn invalid_configs_are_rejected() {
    let base = ModelConfig {
        strategy: Strategy::Add,
        dims: Dims::uniform(4, 2),
        use_attention: true,
        use_recurrence: false,
        vocab_size: 10,
        domains: vec!["E".into()],
        tasks: vec![TaskSpec::binary("E-T", "E")],
    };
    assert!(matches!(Model::new(base.clone(), 0), Err(ModelError::Config(_))));
    let outside = ModelConfig {
        use_recurrence: true,
        tasks: vec![TaskSpec::binary("I-T", "I")],
        ..base.clone()
    };
    assert!(Model::new(outside, 0).is_err());
    let flat = ModelConfig {
        strategy: Strategy::Tied,
        ..base
    };
    let m = Model::new(flat, 0).unwrap();
    assert!(m.params.by_name("flat/w").is_some());
    assert!(m.params.by_name("rnn/shared").is_none());
}

#[test]
fn initialization_is_seeded() {
    let (m, _) = micro_setup(Strategy::AddMul, 20, 4, 2, 1).unwrap();
    let a = Model::new(m.config.clone(), 3).unwrap();
    let b = Model::new(m.config.clone(), 3).unwrap();
    let c = Model::new(m.config.clone(), 4).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
    assert!(a.params.by_name("rnn/mul/E").unwrap().data().iter().all(|v| *v == 0.0));
    assert!(a.params.by_name("u/I").unwrap().data().iter().all(|v| *v == 0.0));
}
