mod common;

use common::{small_data, small_model};
use sweetexit::model::{Batch, Gating, MultiExitModel};
use sweetexit::train::{
    backward_sweet, batch_schedule, compute_gradients, loss_early_exit, per_exit_gradients, train,
    Regime, RegimeConfig, Trainer,
};
use sweetexit::{Error, Tape, Tensor};

/// Mean cross-entropy computed from scratch: -log(exp(z_y) / Σ exp(z)).
fn reference_ce(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.cols();
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            let row = &logits.data()[r * c..(r + 1) * c];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[y].exp() / z).ln()
        })
        .sum::<f64>()
        / labels.len() as f64
}

fn batch_of(n: usize) -> (Batch, Vec<usize>) {
    let ds = small_data(n, 9);
    ds.batch(&(0..n).collect::<Vec<_>>()).unwrap()
}

#[test]
fn early_exit_loss_examples() {
    let mut r = common::rng(1);
    let labels = [0, 2, 1];
    let mut tape = Tape::new();
    let one = tape.leaf(common::uniform_tensor(&mut r, &[3, 3], -2.0, 2.0), false);
    let ce = tape.cross_entropy(one, &labels).unwrap();
    let l = loss_early_exit(&mut tape, &[one], &labels).unwrap();
    assert_eq!(tape.value(l).data(), tape.value(ce).data());

    let l = loss_early_exit(&mut tape, &[one, one, one, one], &labels).unwrap();
    assert!((tape.value(l).data()[0] - 4.0 * tape.value(ce).data()[0]).abs() < 1e-12);

    let logits: Vec<Tensor> = (0..4).map(|_| common::uniform_tensor(&mut r, &[3, 3], -2.0, 2.0)).collect();
    let vars: Vec<_> = logits.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let l = loss_early_exit(&mut tape, &vars, &labels).unwrap();
    let expected: f64 = logits.iter().map(|t| reference_ce(t, &labels)).sum();
    assert!((tape.value(l).data()[0] - expected).abs() <= 1e-12);
}

#[test]
fn sweet_segment_two_gets_only_its_own_loss() {
    let model = MultiExitModel::init(small_model(vec![1, 2, 4], 3)).unwrap();
    let (batch, labels) = batch_of(6);
    let per_loss = per_exit_gradients(&model, &batch, &labels, Gating::SegmentBoundaries).unwrap();
    let total = compute_gradients(&model, &batch, &labels, Gating::SegmentBoundaries).unwrap();
    for (i, p) in model.params.iter().enumerate() {
        if p.segment != 2 {
            continue;
        }
        assert!(per_loss[0][i].data().iter().all(|&g| g == 0.0), "{}", p.name);
        assert!(per_loss[2][i].data().iter().all(|&g| g == 0.0), "{}", p.name);
        assert!(total.grads[i].bit_eq(&per_loss[1][i]), "{}", p.name);
    }
}

#[test]
fn sweet_with_one_exit_is_plain_backward() {
    let model = MultiExitModel::init(small_model(vec![2], 3)).unwrap();
    let (batch, labels) = batch_of(5);
    let gated = compute_gradients(&model, &batch, &labels, Gating::SegmentBoundaries).unwrap();
    let plain = compute_gradients(&model, &batch, &labels, Gating::None).unwrap();
    for (a, b) in gated.grads.iter().zip(&plain.grads) {
        assert!(a.bit_eq(b));
    }
}

#[test]
fn sweet_segment_one_matches_standalone_first_exit_model() {
    let model = MultiExitModel::init(small_model(vec![1, 2, 4], 11)).unwrap();
    let standalone = model.prefix_model(1).unwrap();
    let (batch, labels) = batch_of(7);

    let mut tape = Tape::new();
    let graph = model.build_graph(&mut tape, &batch, Gating::SegmentBoundaries, true).unwrap();
    let sweet = backward_sweet(&mut tape, &graph, &labels, &model.topology).unwrap();

    let mut t2 = Tape::new();
    let g2 = standalone.build_graph(&mut t2, &batch, Gating::None, true).unwrap();
    let ce = t2.cross_entropy(g2.exit_logits[0], &labels).unwrap();
    let alone = t2.backward(ce).unwrap();

    let mut checked = 0;
    for (i, p) in standalone.params.iter().enumerate() {
        let name = p.name.clone();
        let j = model.params.position(&name).unwrap();
        let a = sweet.get(graph.params[j]).unwrap();
        let b = alone.get(g2.params[i]).unwrap();
        assert!(a.bit_eq(b), "{name}");
        checked += 1;
    }
    assert_eq!(checked, standalone.params.len());
}

#[test]
fn backward_sweet_rejects_topology_mismatch() {
    let model = MultiExitModel::init(small_model(vec![1, 2], 3)).unwrap();
    let other = MultiExitModel::init(small_model(vec![1, 2, 3], 3)).unwrap();
    let (batch, labels) = batch_of(3);
    let mut tape = Tape::new();
    let graph = model.build_graph(&mut tape, &batch, Gating::SegmentBoundaries, true).unwrap();
    assert!(backward_sweet(&mut tape, &graph, &labels, &other.topology).is_err());
}

#[test]
fn early_exit_joint_gradient_is_sum_of_per_loss_gradients() {
    let model = MultiExitModel::init(small_model(vec![1, 2, 4], 5)).unwrap();
    let (batch, labels) = batch_of(6);
    let per_loss = per_exit_gradients(&model, &batch, &labels, Gating::None).unwrap();
    let joint = compute_gradients(&model, &batch, &labels, Gating::None).unwrap();
    for i in 0..model.params.len() {
        let mut acc = per_loss[0][i].clone();
        for l in &per_loss[1..] {
            acc.add_assign(&l[i]).unwrap();
        }
        assert!(acc.bit_eq(&joint.grads[i]), "{}", model.params.get(i).name);
    }
}

#[test]
fn two_epochs_of_a_hundred_batches_log_two_hundred_steps() {
    let data = small_data(1600, 2);
    let cfg = RegimeConfig { epochs: 2, batch_size: 16, ..RegimeConfig::default() };
    assert_eq!(batch_schedule(data.len(), &cfg).len(), 200);
    let out = train(&cfg, &small_model(vec![1, 2], 1), &data).unwrap();
    assert_eq!(out.log.len(), 200);
    assert_eq!(out.log.last().unwrap().step, 199);
    assert!(out.log.iter().all(|r| r.exit_losses.len() == 2));
}

#[test]
fn multi_model_trains_one_model_per_exit() {
    let data = small_data(64, 2);
    let cfg = RegimeConfig { regime: Regime::MultiModel, epochs: 1, ..RegimeConfig::default() };
    let out = train(&cfg, &small_model(vec![1, 2, 4], 1), &data).unwrap();
    let depths: Vec<usize> = out.models.iter().map(|m| m.config.n_layers).collect();
    assert_eq!(depths, vec![1, 2, 4]);
    assert_eq!(out.log.len(), 3 * 4);
    assert_eq!(out.log[4].sub_model, Some(2));
}

#[test]
fn multi_model_sub_models_have_independent_inits() {
    use sweetexit::train::initial_models;
    let model_cfg = small_model(vec![1, 2, 4], 7);
    let cfg = RegimeConfig { regime: Regime::MultiModel, ..RegimeConfig::default() };
    let subs = initial_models(&cfg, &model_cfg).unwrap();
    let full = MultiExitModel::init(model_cfg.clone()).unwrap();
    let first = full.prefix_model(1).unwrap();
    assert!(!subs[0].params.bit_eq(&first.params));
    assert!(subs[2].params.bit_eq(&full.params.clone()) || subs[2].num_exits() == 1);

    let aligned = initial_models(&RegimeConfig { aligned_init: true, ..cfg }, &model_cfg).unwrap();
    assert!(aligned[0].params.bit_eq(&first.params));
}

#[test]
fn sweet_first_classifier_equals_aligned_multi_model_after_training() {
    let data = small_data(96, 4);
    let model_cfg = small_model(vec![1, 2, 4], 21);
    let sweet = train(&RegimeConfig { regime: Regime::Sweet, ..RegimeConfig::default() }, &model_cfg, &data).unwrap();
    let mm = train(
        &RegimeConfig { regime: Regime::MultiModel, aligned_init: true, ..RegimeConfig::default() },
        &model_cfg,
        &data,
    )
    .unwrap();
    let trained_prefix = sweet.models[0].prefix_model(1).unwrap();
    assert!(trained_prefix.params.bit_eq(&mm.models[0].params));
}

#[test]
fn single_exit_regimes_coincide() {
    let data = small_data(80, 3);
    let model_cfg = small_model(vec![3], 2);
    let outs: Vec<_> = Regime::ALL
        .iter()
        .map(|&regime| train(&RegimeConfig { regime, ..RegimeConfig::default() }, &model_cfg, &data).unwrap())
        .collect();
    for o in &outs[1..] {
        assert_eq!(o.models.len(), 1);
        assert!(o.models[0].params.bit_eq(&outs[0].models[0].params), "{}", o.regime);
    }
}

#[test]
fn training_is_deterministic() {
    let data = small_data(64, 3);
    for regime in Regime::ALL {
        let cfg = RegimeConfig { regime, ..RegimeConfig::default() };
        let a = train(&cfg, &small_model(vec![1, 2], 2), &data).unwrap();
        let b = train(&cfg, &small_model(vec![1, 2], 2), &data).unwrap();
        assert_eq!(a.log, b.log);
        for (x, y) in a.models.iter().zip(&b.models) {
            assert!(x.params.bit_eq(&y.params));
        }
    }
}

#[test]
fn training_reduces_loss() {
    let data = small_data(400, 5);
    let out = train(&RegimeConfig { epochs: 3, ..RegimeConfig::default() }, &small_model(vec![1, 2], 2), &data).unwrap();
    let head: f64 = out.log[..10].iter().map(|r| r.exit_losses[1]).sum();
    let tail: f64 = out.log[out.log.len() - 10..].iter().map(|r| r.exit_losses[1]).sum();
    assert!(tail < head, "loss went from {head} to {tail}");
}

#[test]
fn divergence_names_the_step() {
    let data = small_data(64, 3);
    let cfg = RegimeConfig { learning_rate: 1e300, ..RegimeConfig::default() };
    match train(&cfg, &small_model(vec![1, 2], 2), &data) {
        Err(Error::Diverged { step, regime, .. }) => {
            assert!(step >= 1);
            assert_eq!(regime, "ee");
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn config_validation() {
    let bad = RegimeConfig { learning_rate: 0.0, epochs: 0, batch_size: 0, ..RegimeConfig::default() };
    match bad.validate() {
        Err(Error::Config(p)) => assert_eq!(p.len(), 3),
        other => panic!("{other:?}"),
    }
}

#[test]
fn trainer_steps_are_counted() {
    let data = small_data(32, 3);
    let model = MultiExitModel::init(small_model(vec![1, 2], 2)).unwrap();
    let cfg = RegimeConfig::default();
    let mut trainer = Trainer::new(model, &cfg, 10);
    let (batch, labels) = data.batch(&[0, 1, 2, 3]).unwrap();
    let r = trainer.step(&batch, &labels).unwrap();
    assert_eq!(r.step, 0);
    assert_eq!(trainer.steps_taken(), 1);
    assert_eq!(trainer.optimizer().step(), 1);
}
