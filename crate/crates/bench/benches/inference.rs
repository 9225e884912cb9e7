use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use sweetexit::data::{generate_synthetic, Dataset, SyntheticTaskSpec};
use sweetexit::exit::{predict_early_exit, ExitPolicy};
use sweetexit::model::{Gating, ModelConfig, MultiExitModel};
use sweetexit::rng::streams;
use sweetexit::train::compute_gradients;

fn setup(batch: usize) -> (MultiExitModel, Dataset) {
    let model = MultiExitModel::init(ModelConfig::default()).unwrap();
    let spec = SyntheticTaskSpec { size: batch, ..SyntheticTaskSpec::default() };
    (model, generate_synthetic(&spec, "bench", streams::SYNTH_TRAIN).unwrap())
}

fn forward(c: &mut Criterion) {
    let (model, ds) = setup(16);
    let (batch, _) = ds.batch(&(0..16).collect::<Vec<_>>()).unwrap();
    c.bench_function("forward_all_exits/16", |b| b.iter(|| model.forward_all_exits(black_box(&batch)).unwrap()));
}

fn backward(c: &mut Criterion) {
    let (model, ds) = setup(16);
    let (batch, labels) = ds.batch(&(0..16).collect::<Vec<_>>()).unwrap();
    let mut group = c.benchmark_group("gradients/16");
    for (name, gating) in [("ee", Gating::None), ("sweet", Gating::SegmentBoundaries)] {
        group.bench_function(name, |b| b.iter(|| compute_gradients(&model, &batch, &labels, gating).unwrap()));
    }
    group.finish();
}

// Threshold 0.5 accepts at exit 1; near 1.0 nothing is confident enough
// and every instance runs the full stack.
fn early_exit(c: &mut Criterion) {
    let (model, ds) = setup(32);
    let mut group = c.benchmark_group("early_exit/32");
    for t in [0.5, 0.999] {
        let policy = ExitPolicy::confidence(model.num_exits(), t);
        group.bench_with_input(BenchmarkId::from_parameter(t), &policy, |b, policy| {
            b.iter(|| {
                for inst in &ds.instances {
                    black_box(predict_early_exit(&model, policy, inst.id, &inst.tokens, None).unwrap());
                }
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward, backward, early_exit);
criterion_main!(benches);
