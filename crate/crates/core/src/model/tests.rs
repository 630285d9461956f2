use super::*;
use crate::data::{synthesize_dataset, SyntheticSpec};
use crate::graph::build_graph;
use crate::numeric::{finite_difference, relative_error};

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// Three accounts over eight items, two of which share item 4.
fn toy() -> Dataset {
    Dataset::from_index_sequences(
        8,
        3,
        &[
            (0, vec![0, 1, 2, 1]),
            (0, vec![2, 3, 0]),
            (1, vec![4, 5, 6, 4]),
            (2, vec![7, 4, 3, 7, 5]),
        ],
    )
    .unwrap()
}

fn toy_gc2n() -> Gc2nConfig {
    Gc2nConfig {
        d1: 8,
        d2: 8,
        alpha: 2,
        layers: 2,
        routing_iters: 3,
        ..Gc2nConfig::default()
    }
}

fn toy_train(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        epochs: 1,
        seed,
        ..TrainConfig::default()
    }
}

fn all_sequences(d: &Dataset) -> Vec<usize> {
    (0..d.sequences.len()).collect()
}

#[test]
fn zero_head_predicts_uniform() {
    let m = 7;
    let p = predict(&random(3, 4, 1), &random(3, 4, 2), &Tensor::zeros(8, m), &Tensor::zeros(1, m)).unwrap();
    assert!(p.data().iter().all(|&v| (v - 1.0 / m as f64).abs() < 1e-15));
}

#[test]
fn bias_spike_dominates() {
    let mut b = Tensor::zeros(1, 6);
    b.set(0, 4, 1e3);
    let p = predict(&random(2, 3, 3), &random(2, 3, 4), &random(6, 6, 5), &b).unwrap();
    for r in 0..2 {
        let best = (0..6).max_by(|&x, &y| p.get(r, x).total_cmp(&p.get(r, y))).unwrap();
        assert_eq!(best, 4);
    }
}

#[test]
fn predict_matches_direct_softmax() {
    let (f, a, w, b) = (random(4, 3, 6), random(4, 2, 7), random(5, 9, 8), random(1, 9, 9));
    let p = predict(&f, &a, &w, &b).unwrap();
    for r in 0..4 {
        let x: Vec<f64> = f.row(r).iter().chain(a.row(r)).copied().collect();
        let logits: Vec<f64> = (0..9).map(|c| (0..5).map(|k| x[k] * w.get(k, c)).sum::<f64>() + b.get(0, c)).collect();
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        for (c, l) in logits.iter().enumerate() {
            assert!((p.get(r, c) - l.exp() / z).abs() < 1e-14);
        }
        assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn predict_rejects_mismatched_head() {
    assert!(predict(&random(2, 3, 1), &random(2, 3, 2), &random(5, 4, 3), &Tensor::zeros(1, 4)).is_err());
}

fn batch_forward(model: &Model, d: &Dataset, batch: &[usize]) -> (f64, f64, f64) {
    let graph = build_graph(d).unwrap();
    let edges = model.edges(&graph).unwrap();
    let mut tape = Tape::new();
    let (vars, out) = model.encode(&mut tape, &edges, None).unwrap();
    let f = model.head(&mut tape, &vars, &out, d, batch).unwrap();
    let v = |x| tape.value(x).item().unwrap();
    (v(f.loss), v(f.loss_s), v(f.loss_c))
}

fn ready_model(gc2n: Gc2nConfig, train: TrainConfig, d: &Dataset) -> Model {
    let mut model = Model::new(gc2n, train, d).unwrap();
    let graph = build_graph(d).unwrap();
    let edges = model.edges(&graph).unwrap();
    model.refresh_bases(&edges, d, 0).unwrap();
    model
}

#[test]
fn zero_head_loss_is_log_m() {
    let d = toy();
    let mut model = ready_model(toy_gc2n(), toy_train(1), &d);
    model.params.get_mut(model.ids.w_f).value = Tensor::zeros(16, 8);
    let (_, loss_s, _) = batch_forward(&model, &d, &all_sequences(&d));
    assert!((loss_s - 8f64.ln()).abs() < 1e-12);
}

#[test]
fn perfect_prediction_has_zero_loss() {
    let d = toy();
    let mut model = ready_model(toy_gc2n(), toy_train(1), &d);
    let target = d.sequences[2].target().0;
    model.params.get_mut(model.ids.w_f).value = Tensor::zeros(16, 8);
    model.params.get_mut(model.ids.b_f).value.set(0, target, 1e3);
    let (_, loss_s, _) = batch_forward(&model, &d, &[2]);
    assert!(loss_s.abs() < 1e-12);
}

#[test]
fn gamma_zero_loss_is_sequence_loss() {
    let d = toy();
    let model = ready_model(toy_gc2n(), TrainConfig { gamma: 0.0, ..toy_train(3) }, &d);
    let (loss, loss_s, loss_c) = batch_forward(&model, &d, &all_sequences(&d));
    assert_eq!(loss, loss_s);
    assert!(loss_c > 0.0);
}

#[test]
fn losses_add_with_gamma() {
    let d = toy();
    let model = ready_model(toy_gc2n(), toy_train(3), &d);
    let (loss, loss_s, loss_c) = batch_forward(&model, &d, &all_sequences(&d));
    assert!((loss - (loss_s + 0.9 * loss_c)).abs() < 1e-12);
}

#[test]
fn zero_epochs_keep_initialization() {
    let d = toy();
    let graph = build_graph(&d).unwrap();
    let mut model = Model::new(toy_gc2n(), TrainConfig { epochs: 0, ..toy_train(4) }, &d).unwrap();
    let before = model.params.clone();
    let log = model.fit(&d, &graph, |_| {}).unwrap();
    assert!(log.is_empty());
    assert!(model.params.values_equal(&before));
}

#[test]
fn one_epoch_lowers_toy_loss() {
    let d = toy();
    let graph = build_graph(&d).unwrap();
    let seqs = all_sequences(&d);
    let mut improved = 0;
    for seed in 0..5 {
        let mut model = Model::new(toy_gc2n(), toy_train(seed), &d).unwrap();
        let edges = model.edges(&graph).unwrap();
        model.refresh_bases(&edges, &d, 0).unwrap();
        let before = model.loss(&graph, &d, &seqs).unwrap();
        model.fit(&d, &graph, |_| {}).unwrap();
        let after = model.loss(&graph, &d, &seqs).unwrap();
        improved += usize::from(after < before);
    }
    assert!(improved >= 4, "improved in only {improved} of 5 seeds");
}

#[test]
fn no_contrastive_matches_gamma_zero() {
    let d = toy();
    let graph = build_graph(&d).unwrap();
    let train = TrainConfig { epochs: 3, ..toy_train(5) };
    let mut flagged = Model::new(
        toy_gc2n(),
        TrainConfig {
            ablation: Ablation { no_contrastive: true, ..Ablation::FULL },
            ..train.clone()
        },
        &d,
    )
    .unwrap();
    let mut zeroed = Model::new(toy_gc2n(), TrainConfig { gamma: 0.0, ..train }, &d).unwrap();
    let a = flagged.fit(&d, &graph, |_| {}).unwrap();
    let b = zeroed.fit(&d, &graph, |_| {}).unwrap();
    assert_eq!(a, b);
    assert!(flagged.params.values_equal(&zeroed.params));
    assert!(a.iter().all(|m| m.loss_c > 0.0), "contrastive term is still computed");
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let d = toy();
    let graph = build_graph(&d).unwrap();
    let seqs = all_sequences(&d);
    for refine in [RefineMode::Soft, RefineMode::Dominant] {
        let model = ready_model(toy_gc2n(), TrainConfig { refine, ..toy_train(6) }, &d);
        let edges = model.edges(&graph).unwrap();
        let loss_of = |m: &Model, tape: &mut Tape| {
            let (vars, out) = m.encode(tape, &edges, None).unwrap();
            m.head(tape, &vars, &out, &d, &seqs).unwrap().loss
        };
        let mut grads = model.params.clone();
        grads.zero_grad();
        let mut tape = Tape::new();
        let root = loss_of(&model, &mut tape);
        tape.backward(root, &mut grads).unwrap();
        for id in model.params.ids() {
            let numeric = finite_difference(model.params.value(id), 1e-6, |probe| {
                let mut m = model.clone();
                m.params.get_mut(id).value = probe.clone();
                let mut tape = Tape::new();
                let root = loss_of(&m, &mut tape);
                tape.value(root).item().unwrap()
            });
            let err = relative_error(grads.grad(id), &numeric, 1e-8);
            assert!(err < 1e-4, "{:?} {}: relative error {err}", refine, model.params.get(id).name);
        }
    }
}

#[test]
fn batch_order_does_not_change_loss() {
    let d = toy();
    let model = ready_model(toy_gc2n(), toy_train(7), &d);
    let a = batch_forward(&model, &d, &[0, 1, 2, 3]);
    let b = batch_forward(&model, &d, &[3, 1, 0, 2]);
    assert_eq!(a, b);
}

#[test]
fn parameter_count_matches_closed_form() {
    let cfg = Gc2nConfig::default();
    let model = Model::with_sizes(cfg.clone(), TrainConfig::default(), 1000, 100, 0).unwrap();
    // E_I, E_A | W_l, b_l | W_c, b_c | 2 layers of W1..W5 | W_d | W_s | W_f, b_f
    let by_hand = 1000 * 16 + 100 * 16 + (256 + 16) + (16 * 32 + 32) + 10 * 256 + 32 + 256 + (32 * 1000 + 1000);
    assert_eq!(by_hand, 54_264);
    assert_eq!(model.parameter_count(), by_hand);
    assert_eq!(parameter_count(&cfg, 1000, 100), by_hand);
}

#[test]
fn parameter_count_grows_with_layers() {
    let counts: Vec<usize> = (0..5)
        .map(|layers| parameter_count(&Gc2nConfig { layers, ..Gc2nConfig::default() }, 100, 10))
        .collect();
    assert!(counts.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn fixed_seed_gives_identical_runs() {
    let d = toy();
    let graph = build_graph(&d).unwrap();
    let run = || {
        let mut m = Model::new(toy_gc2n(), TrainConfig { epochs: 3, ..toy_train(8) }, &d).unwrap();
        let log = m.fit(&d, &graph, |_| {}).unwrap();
        (log, m.params)
    };
    let (log_a, pa) = run();
    let (log_b, pb) = run();
    assert_eq!(log_a, log_b);
    assert!(pa.values_equal(&pb));
}

#[test]
fn non_finite_parameters_abort_training() {
    let d = toy();
    let graph = build_graph(&d).unwrap();
    let mut model = Model::new(toy_gc2n(), toy_train(9), &d).unwrap();
    model.params.get_mut(model.ids.b_f).value.set(0, 0, f64::NAN);
    match model.fit(&d, &graph, |_| {}) {
        Err(Error::Divergence { epoch: 0, batch: 0, .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn checkpoint_round_trips() {
    let d = toy();
    let graph = build_graph(&d).unwrap();
    let mut model = Model::new(toy_gc2n(), TrainConfig { epochs: 2, ..toy_train(10) }, &d).unwrap();
    model.fit(&d, &graph, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert!(back.params.values_equal(&model.params));
    assert_eq!(back.params.steps_taken(), model.params.steps_taken());
    assert_eq!(back.coupling_init, model.coupling_init);
    assert_eq!(back.bases, model.bases);
    assert_eq!(back.gc2n, model.gc2n);
    assert_eq!(back.train, model.train);
    let seqs = all_sequences(&d);
    assert_eq!(back.loss(&graph, &d, &seqs).unwrap(), model.loss(&graph, &d, &seqs).unwrap());
}

#[test]
fn checkpoint_keeps_ablation() {
    let d = toy();
    let train = TrainConfig {
        ablation: Ablation { no_linear_attention: true, no_subspace: true, ..Ablation::FULL },
        ..toy_train(11)
    };
    let model = Model::new(toy_gc2n(), train, &d).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert!(!back.gc2n.use_linear_attention);
    assert!(back.bases.is_none());
    assert_eq!(back.train.ablation.name(), "w/oLA+w/oSA");
}

#[test]
fn checkpoint_rejects_other_vocabulary() {
    let d = toy();
    let model = Model::new(toy_gc2n(), toy_train(12), &d).unwrap();
    let other = Dataset::from_index_sequences(9, 3, &[(0, vec![1, 0]), (1, vec![2, 3]), (2, vec![4, 5, 6, 8])]).unwrap();
    let graph = build_graph(&other).unwrap();
    match model.evaluate(&graph, &other) {
        Err(Error::Compatibility(_)) => {}
        r => panic!("expected a compatibility error, got {r:?}"),
    }
}

#[test]
fn truncated_checkpoint_is_an_error() {
    let d = toy();
    let model = Model::new(toy_gc2n(), toy_train(13), &d).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, &text[..text.len() / 2]).unwrap();
    assert!(matches!(Model::load(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn contrastive_loss_falls_early_in_training() {
    let spec = SyntheticSpec {
        n_accounts: 40,
        n_items: 120,
        pool_size: 15,
        ..SyntheticSpec::default()
    };
    let mut falls = 0;
    for seed in 0..5 {
        let d = synthesize_dataset(&SyntheticSpec { seed, ..spec.clone() }).unwrap();
        let graph = build_graph(&d).unwrap();
        let mut model = Model::new(
            Gc2nConfig::default(),
            TrainConfig {
                epochs: 10,
                batch_size: 64,
                seed,
                ..TrainConfig::default()
            },
            &d,
        )
        .unwrap();
        let log = model.fit(&d, &graph, |_| {}).unwrap();
        falls += usize::from(log[9].loss_c < log[0].loss_c);
    }
    assert!(falls >= 4, "contrastive loss fell in only {falls} of 5 seeds");
}

#[test]
fn ablation_names() {
    assert_eq!(Ablation::FULL.name(), "full");
    let names: Vec<_> = Ablation::variants().iter().map(|(n, a)| (n.to_string(), a.name())).collect();
    for (n, a) in names {
        assert_eq!(n, a);
    }
}

#[test]
fn invalid_training_config_is_rejected() {
    let d = toy();
    for bad in [
        TrainConfig { batch_size: 0, ..toy_train(0) },
        TrainConfig { gamma: -1.0, ..toy_train(0) },
        TrainConfig { beta: 0.0, ..toy_train(0) },
        TrainConfig { dropout: 1.0, ..toy_train(0) },
    ] {
        assert!(Model::new(toy_gc2n(), bad, &d).is_err());
    }
}
