mod common;

use common::{small_data, small_model};
use proptest::prelude::*;
use rand::Rng;
use sweetexit::eval::{
    accuracy, comparison_csv, compare_regimes, curve_csv, evaluate_classifier, interpolate_at, matthews,
    speedup_ratio, sweep, target_ratios, threshold_grid, CompareConfig, Confusion, CurvePoint, Metric, SpeedupMode,
};
use sweetexit::exit::{argmax, ExitPolicy, ExitTable, ExitTrace, PolicyKind};
use sweetexit::model::{ExitTopology, MultiExitModel};
use sweetexit::train::{Regime, RegimeConfig};

fn topology() -> ExitTopology {
    ExitTopology::new(vec![1, 4, 6, 12]).unwrap()
}

fn traces_at(exits: &[usize]) -> Vec<ExitTrace> {
    exits
        .iter()
        .enumerate()
        .map(|(id, &e)| ExitTrace::new(id, e, &[1, 4, 6, 12], 0, 1.0, None))
        .collect()
}

fn point(speedup: f64, score: f64) -> CurvePoint {
    CurvePoint {
        threshold: 0.5,
        speedup,
        score,
        counts: vec![],
    }
}

#[test]
fn binary_grid() {
    let g = threshold_grid(2).unwrap();
    assert_eq!(g.len(), 11);
    assert!((g[0] - (0.5 + 1.0 / 24.0)).abs() < 1e-15);
    assert!((g[10] - (1.0 - 1.0 / 24.0)).abs() < 1e-15);
}

#[test]
fn grids_are_open_and_evenly_spaced() {
    for n in 2..7 {
        let g = threshold_grid(n).unwrap();
        let lo = 1.0 / n as f64;
        assert!(g[0] > lo && g[10] < 1.0);
        let step = (1.0 - lo) / 12.0;
        for w in g.windows(2) {
            assert!(w[1] > w[0]);
            assert!((w[1] - w[0] - step).abs() < 1e-12);
        }
    }
    assert!(threshold_grid(1).is_err());
}

#[test]
fn speedup_worked_examples() {
    let t = topology();
    assert_eq!(speedup_ratio(&traces_at(&[4, 4, 4]), &t, SpeedupMode::EarlyExit).unwrap(), 1.0);
    assert_eq!(speedup_ratio(&traces_at(&[3; 5]), &t, SpeedupMode::EarlyExit).unwrap(), 6.0 / 12.0);
    assert_eq!(speedup_ratio(&traces_at(&[3; 5]), &t, SpeedupMode::MultiModel).unwrap(), 11.0 / 12.0);
    assert!(speedup_ratio(&[], &t, SpeedupMode::EarlyExit).is_err());
}

proptest! {
    #[test]
    fn speedup_matches_per_instance_counting(exits in prop::collection::vec(1usize..=4, 1..200)) {
        let traces = traces_at(&exits);
        let depths = [1usize, 4, 6, 12];
        let ee: f64 = exits.iter().map(|&e| depths[e - 1] as f64 / 12.0).sum::<f64>() / exits.len() as f64;
        let mm: f64 = exits.iter().map(|&e| depths[..e].iter().sum::<usize>() as f64 / 12.0).sum::<f64>()
            / exits.len() as f64;
        prop_assert!((speedup_ratio(&traces, &topology(), SpeedupMode::EarlyExit).unwrap() - ee).abs() <= 1e-12);
        prop_assert!((speedup_ratio(&traces, &topology(), SpeedupMode::MultiModel).unwrap() - mm).abs() <= 1e-12);
    }

    #[test]
    fn matthews_is_symmetric_under_label_swap(pairs in prop::collection::vec((0usize..2, 0usize..2), 1..100)) {
        let (p, y): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let flip = |v: &[usize]| v.iter().map(|x| 1 - x).collect::<Vec<_>>();
        let a = matthews(&p, &y).unwrap();
        let b = matthews(&flip(&p), &flip(&y)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn collinear_interpolation(slope in -50.0f64..50.0, c in -10.0f64..10.0, x in 0.2f64..0.8) {
        let pts: Vec<_> = [0.1, 0.5, 0.9].iter().map(|&s| point(s, slope * s + c)).collect();
        let got = interpolate_at(&pts, &[x])[0].score.unwrap();
        prop_assert!((got - (slope * x + c)).abs() <= 1e-12);
    }
}

#[test]
fn interpolation_fixtures() {
    let pts = vec![point(0.6, 80.0), point(0.4, 70.0)];
    let got = interpolate_at(&pts, &[0.5, 0.4, 0.6, 0.3, 0.7]);
    assert_eq!(got[0].score, Some(75.0));
    assert_eq!(got[1].score, Some(70.0));
    assert_eq!(got[2].score, Some(80.0));
    assert_eq!((got[3].score, got[4].score), (None, None));
}

#[test]
fn target_ratios_scale_with_depth() {
    assert_eq!(target_ratios(12, SpeedupMode::EarlyExit), vec![1.0 / 12.0, 0.25, 0.5, 0.75, 1.0]);
    assert_eq!(target_ratios(4, SpeedupMode::EarlyExit), vec![0.25, 0.5, 0.75, 1.0]);
    assert_eq!(target_ratios(12, SpeedupMode::MultiModel).len(), 7);
}

#[test]
fn matthews_fixtures() {
    let c = Confusion { tp: 40, tn: 40, fp: 10, fn_: 10 };
    assert!((c.matthews() - 0.6).abs() < 1e-15);
    let y = [0, 1, 1, 0, 1];
    assert_eq!(matthews(&y, &y).unwrap(), 1.0);
    assert_eq!(accuracy(&y, &y), 1.0);
    assert!(matthews(&[0, 2], &[0, 1]).is_err());
}

#[test]
fn random_predictions_score_at_chance() {
    let mut r = common::rng(4);
    let n = 20_000;
    let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let p: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
    let sigma = 0.5 / (n as f64).sqrt();
    assert!((accuracy(&p, &y) - 0.5).abs() < 3.0 * sigma);
    assert!(matthews(&p, &y).unwrap().abs() < 3.0 / (n as f64).sqrt());
}

#[test]
fn forced_exit_evaluation_matches_single_instance_forward() {
    let model = MultiExitModel::init(small_model(vec![1, 2, 4], 3)).unwrap();
    let ds = small_data(30, 3);
    for exit in 1..=3 {
        let preds: Vec<usize> = ds
            .instances
            .iter()
            .map(|i| argmax(&model.forward_until(&i.tokens, exit).unwrap().0))
            .collect();
        let expected = accuracy(&preds, &ds.labels());
        let got = evaluate_classifier(&model, exit, &ds, Metric::Accuracy, 8, 1).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }
    assert!(evaluate_classifier(&model, 4, &ds, Metric::Accuracy, 8, 1).is_err());
}

#[test]
fn sweep_points_are_consistent() {
    let model = MultiExitModel::init(small_model(vec![1, 2, 4], 3)).unwrap();
    let ds = small_data(60, 3);
    let table = ExitTable::from_model(&model, &ds, 16, 1).unwrap();
    let grid = threshold_grid(2).unwrap();
    let mut reversed = grid.clone();
    reversed.reverse();
    let pts = sweep(&table, &ExitPolicy::confidence(3, 0.6), &reversed, SpeedupMode::EarlyExit, Metric::Accuracy, 2)
        .unwrap();
    assert_eq!(pts.len(), 11);
    let topo = ExitTopology::new(vec![1, 2, 4]).unwrap();
    for w in pts.windows(2) {
        assert!(w[0].threshold < w[1].threshold);
        assert!(w[0].speedup <= w[1].speedup);
    }
    for p in &pts {
        assert_eq!(p.counts.iter().sum::<usize>(), 60);
        let layers: usize = p.counts.iter().enumerate().map(|(i, s)| s * topo.exit_layer(i + 1)).sum();
        assert!((p.speedup - layers as f64 / (4.0 * 60.0)).abs() < 1e-15);
    }
    let forced: Vec<f64> = pts.iter().map(|_| evaluate_classifier(&model, 3, &ds, Metric::Accuracy, 16, 1).unwrap()).collect();
    assert!(forced.windows(2).all(|w| w[0] == w[1]));

    let csv = curve_csv(&pts, 3);
    assert!(csv.starts_with("threshold,speedup,score,S_1,S_2,S_3\n"));
    assert_eq!(csv.lines().count(), 12);
}

fn tiny_compare(seeds: Vec<u64>) -> CompareConfig {
    CompareConfig {
        model: small_model(vec![1, 2], 0),
        training: RegimeConfig { epochs: 1, aligned_init: true, ..RegimeConfig::default() },
        seeds,
        policies: vec![PolicyKind::Confidence, PolicyKind::LearnToExit],
        gate: sweetexit::exit::GateConfig { iterations: 30, ..Default::default() },
        ..CompareConfig::default()
    }
}

#[test]
fn comparison_bookkeeping() {
    let train = small_data(64, 1);
    let val = sweetexit::data::generate_synthetic(&common::small_task(40, 1), "validation", 5).unwrap();
    let cfg = tiny_compare(vec![3]);
    let out = compare_regimes(&cfg, &train, &val, 1).unwrap();
    assert_eq!(out.rows.len(), 3 * 2);
    assert_eq!(comparison_csv(&out.rows).lines().count(), 1 + 6);
    assert!(out.summary.iter().all(|s| s.std == 0.0 && s.n_seeds == 1));
    assert_eq!(out.curves.len(), 3 * 2);
    assert!(out.runs.iter().all(|r| !r.diverged));

    let score = |regime: Regime| out.rows.iter().find(|r| r.regime == regime && r.exit == 1).unwrap().score;
    assert_eq!(score(Regime::Sweet), score(Regime::MultiModel));

    let mm_curve = out.curves.iter().find(|c| c.curve.regime == "mm").unwrap();
    assert_eq!(mm_curve.curve.mode, SpeedupMode::MultiModel);
}

#[test]
fn comparison_is_thread_independent_and_sweeps_sizes() {
    let train = small_data(64, 1);
    let val = small_data(20, 2);
    let cfg = CompareConfig {
        train_sizes: vec![32, 64],
        regimes: vec![Regime::EarlyExit],
        policies: vec![],
        ..tiny_compare(vec![1, 2])
    };
    let a = compare_regimes(&cfg, &train, &val, 1).unwrap();
    let b = compare_regimes(&cfg, &train, &val, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 2 * 2 * 2);
    assert_eq!(a.summary.len(), 2 * 2);
}

#[test]
fn divergent_runs_are_flagged() {
    let train = small_data(32, 1);
    let val = small_data(10, 2);
    let mut cfg = tiny_compare(vec![0]);
    cfg.regimes = vec![Regime::EarlyExit];
    cfg.policies = vec![];
    cfg.training.learning_rate = 1e300;
    let out = compare_regimes(&cfg, &train, &val, 1).unwrap();
    let run = &out.runs[0];
    assert!(run.diverged && run.excluded && run.rerun_seed.is_some());
    assert!(out.rows.is_empty());
    assert_eq!(out.summary[0].n_seeds, 0);
}
