use super::*;
use crate::config::ModelConfig;
use crate::data::{split_and_normalize, synth, SplitConfig, SynthConfig};
use crate::model::random_static_table;
use crate::tensor::load_checkpoint;
use proptest::prelude::*;

fn scalar_store(value: f64, grad: Option<f64>) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new(&[1], vec![value]).unwrap());
    store.get_mut(id).set_grad(grad.map(|g| vec![g])).unwrap();
    store
}

fn setup(seed: u64) -> (HstMixer<f32>, Splits) {
    let cfg = ModelConfig::tiny();
    let data = synth(&SynthConfig::new(cfg.nodes, 96 * 2, 2, seed)).unwrap();
    let splits = split_and_normalize(&data.dataset, &SplitConfig::default()).unwrap();
    let model = HstMixer::new(&cfg, &random_static_table(cfg.nodes, cfg.d, seed), seed).unwrap();
    (model, splits)
}

fn quick(epochs: usize, patience: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        patience,
        batch_size: 16,
        stride: 4,
        adam: AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn zero_gradient_leaves_parameters() {
    let mut store = scalar_store(0.75, Some(0.0));
    let mut adam = Adam::new(&store, AdamConfig::default());
    adam.step(&mut store).unwrap();
    assert_eq!(store.get(store.find("w").unwrap()).data(), &[0.75]);
    assert_eq!(adam.steps(), 1);
}

#[test]
fn hand_adam_step() {
    // m_hat = 1, v_hat = 1: the update is lr / (1 + eps).
    let mut store = scalar_store(0.5, Some(1.0));
    let mut adam = Adam::new(&store, AdamConfig::default());
    adam.step(&mut store).unwrap();
    let delta = 0.5 - store.get(store.find("w").unwrap()).data()[0];
    assert!((delta - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15, "{delta}");
    assert!(delta > 9.99e-4 && delta < 1e-3);
}

#[test]
fn clipping_scales_the_moment_input() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
    store.get_mut(id).set_grad(Some(vec![6.0, 8.0])).unwrap();
    let mut adam = Adam::new(&store, AdamConfig::default());
    let norm = adam.step(&mut store).unwrap();
    assert_eq!(norm, 10.0);
    assert!((adam.m[0][0] - 0.1 * 3.0).abs() < 1e-12);
    assert!((adam.m[0][1] - 0.1 * 4.0).abs() < 1e-12);
}

#[test]
fn missing_gradient_is_skipped_and_nan_is_named() {
    let mut store = scalar_store(1.0, None);
    let mut adam = Adam::new(&store, AdamConfig::default());
    adam.step(&mut store).unwrap();
    assert_eq!(store.get(store.find("w").unwrap()).data(), &[1.0]);

    let mut store = scalar_store(1.0, Some(f64::NAN));
    let mut adam = Adam::new(&store, AdamConfig::default());
    let err = adam.step(&mut store).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
    assert!(err.to_string().contains("w"), "{err}");
}

#[test]
fn perfect_and_constant_error_metrics() {
    let y = Tensor::from_fn(&[2, 3, 4], |i| 1.0 + i as f64);
    let m = metrics(&y, &y).unwrap();
    assert_eq!((m.mae, m.rmse, m.mape), (0.0, 0.0, 0.0));
    let pred = Tensor::from_fn(&[2, 3, 4], |i| y.data()[i] + if i % 2 == 0 { 0.5 } else { -0.5 });
    let m = metrics(&pred, &y).unwrap();
    assert!((m.mae - 0.5).abs() < 1e-12 && (m.rmse - 0.5).abs() < 1e-12);
    assert_eq!(m.horizons.len(), 4);
    assert!(metrics(&Tensor::<f64>::zeros(&[0, 3, 4]), &Tensor::<f64>::zeros(&[0, 3, 4])).is_err());
}

#[test]
fn metrics_match_scalar_loop() {
    let mut init = crate::nn::Initializer::new(9);
    let y: Tensor<f64> = init.normal(&[5, 3], 1.0);
    let pred: Tensor<f64> = init.normal(&[5, 3], 1.0);
    let (mut abs, mut sq, mut ape, mut n_ape) = (0.0, 0.0, 0.0, 0);
    let mut per_h = [0.0; 3];
    for i in 0..5 {
        for j in 0..3 {
            let (p, t) = (pred.get(&[i, j]), y.get(&[i, j]));
            abs += (p - t).abs();
            sq += (p - t) * (p - t);
            per_h[j] += (p - t).abs() / 5.0;
            if t.abs() >= 0.1 {
                ape += (p - t).abs() / t.abs();
                n_ape += 1;
            }
        }
    }
    let m = metrics(&pred, &y).unwrap();
    assert!((m.mae - abs / 15.0).abs() < 1e-6);
    assert!((m.rmse - (sq / 15.0).sqrt()).abs() < 1e-6);
    assert!((m.mape - 100.0 * ape / n_ape as f64).abs() < 1e-6);
    for j in 0..3 {
        assert!((m.horizons[j].mae - per_h[j]).abs() < 1e-6);
    }
}

#[test]
fn mape_skips_small_targets() {
    let y = Tensor::new(&[1, 1, 3], vec![0.05f64, 2.0, -4.0]).unwrap();
    let pred = Tensor::new(&[1, 1, 3], vec![5.0f64, 3.0, -2.0]).unwrap();
    let m = metrics(&pred, &y).unwrap();
    assert!((m.mape - 100.0 * (0.5 + 0.5) / 2.0).abs() < 1e-12);
}

#[test]
fn zero_epochs_reports_initial_state() {
    let (mut model, splits) = setup(1);
    let before = model.params.clone();
    let report = train(&mut model, &splits, &quick(0, 3)).unwrap();
    assert_eq!(report.epochs.len(), 1);
    assert_eq!(report.epochs[0].epoch, 0);
    assert_eq!(report.steps, 0);
    assert_eq!(report.best_epoch, 0);
    let val = evaluate(&model, &splits, Role::Val, 16).unwrap();
    assert_eq!(val, report.epochs[0].val);
    for ((_, name, a), (_, _, b)) in model.params.iter().zip(before.iter()) {
        if !name.starts_with("norm.") {
            assert_eq!(a.data(), b.data(), "{name}");
        }
    }
}

#[test]
fn frozen_parameters_stop_after_two_epochs() {
    let (mut model, splits) = setup(2);
    let mut cfg = quick(10, 1);
    cfg.adam.lr = 0.0;
    let report = train(&mut model, &splits, &cfg).unwrap();
    let epochs: Vec<usize> = report.epochs.iter().map(|e| e.epoch).collect();
    assert_eq!(epochs, vec![0, 1, 2]);
    assert!(report.stopped_early);
    assert_eq!(report.best_epoch, 1);
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let run = || {
        let (mut model, splits) = setup(3);
        let report = train(&mut model, &splits, &quick(3, 0)).unwrap();
        (model, report)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert!(ra.epochs.last().unwrap().train_loss < ra.epochs[0].train_loss);
    assert_eq!(ra.epochs.iter().map(|e| e.train_loss).collect::<Vec<_>>(), rb.epochs.iter().map(|e| e.train_loss).collect::<Vec<_>>());
    for ((_, _, x), (_, _, y)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(x.data(), y.data());
    }
    for e in &ra.epochs {
        assert!(e.val.rmse >= e.val.mae);
    }
}

#[test]
fn checkpoint_round_trip_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (mut model, splits) = setup(4);
    let mut cfg = quick(2, 0);
    cfg.checkpoint = Some(dir.path().join("best.ckpt"));
    cfg.log = Some(dir.path().join("log.tsv"));
    let report = train(&mut model, &splits, &cfg).unwrap();
    let m1 = evaluate(&model, &splits, Role::Test, 16).unwrap();

    let (mut fresh, _) = setup(99);
    load_checkpoint(&mut fresh.params, cfg.checkpoint.as_ref().unwrap()).unwrap();
    let m2 = evaluate(&fresh, &splits, Role::Test, 16).unwrap();
    assert_eq!(m1, m2);
    let best_val = evaluate(&fresh, &splits, Role::Val, 16).unwrap();
    assert_eq!(best_val.mae, report.best_val_mae);

    let log = fs::read_to_string(cfg.log.as_ref().unwrap()).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 1 + report.epochs.len());
    assert!(lines[1..].iter().all(|l| l.split('\t').count() == 6));
    assert!(lines[2].starts_with("1\t"));
}

#[test]
fn zero_pol_weight_matches_mae_only_gradients() {
    let cfg = ModelConfig {
        beta: 0.0,
        ..ModelConfig::tiny()
    };
    let model = HstMixer::<f64>::new(&cfg, &random_static_table(cfg.nodes, cfg.d, 5), 5).unwrap();
    let data = crate::model::synthetic_batch::<f64>(&cfg, 2, 6);
    let grads_of = |use_total: bool| {
        let mut tape = Tape::new();
        let state = model.forward(&mut tape, &data.x, &data.times).unwrap();
        let loss = model.net.loss(&mut tape, &state, &data.y).unwrap();
        assert!(loss.pol.is_some());
        let target = if use_total { loss.total } else { tape.scale(loss.mae, cfg.alpha) };
        let grads = tape.backward(target).unwrap();
        let mut store = model.params.clone();
        store.absorb_grads(&tape, &grads);
        store.iter().map(|(_, _, t)| t.grad().map(<[f64]>::to_vec)).collect::<Vec<_>>()
    };
    assert_eq!(grads_of(true), grads_of(false));
}

#[test]
fn nan_parameters_diverge() {
    let (mut model, splits) = setup(6);
    let id = model.params.find("head.fc3.bias").unwrap();
    model.params.get_mut(id).data_mut()[0] = f32::NAN;
    match train(&mut model, &splits, &quick(2, 0)) {
        Err(Error::Diverged { epoch, last_good }) => {
            assert_eq!(epoch, 1);
            assert_eq!(last_good, None);
        }
        other => panic!("unexpected {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rmse_dominates_mae(
        pairs in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..60),
    ) {
        let n = pairs.len();
        let pred = Tensor::new(&[n, 1], pairs.iter().map(|p| p.0).collect()).unwrap();
        let y = Tensor::new(&[n, 1], pairs.iter().map(|p| p.1).collect()).unwrap();
        let m = metrics(&pred, &y).unwrap();
        prop_assert!(m.rmse + 1e-12 >= m.mae);
        prop_assert!(m.mae >= 0.0 && m.mape >= 0.0);
    }
}
