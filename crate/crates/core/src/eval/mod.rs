//! Standalone classifier evaluation, threshold sweeps, speedup accounting
//! and cross-regime comparison.

mod compare;
mod curve;
mod metrics;

pub use compare::{
    compare_regimes, comparison_csv, CompareConfig, Comparison, RunRecord, ScoreRow, SeedCurve, SummaryRow,
};
pub use curve::{
    curve_csv, exit_counts, interpolate_at, speedup_from_counts, speedup_ratio, sweep, target_ratios,
    threshold_grid, write_curve_csv, CurvePoint, CurveSet, InterpolatedPoint, SpeedupMode,
};
pub use metrics::{accuracy, auc, matthews, mean_std, score, Confusion, Metric};

use crate::data::Dataset;
use crate::error::Result;
use crate::exit::ExitTable;
use crate::model::MultiExitModel;
use crate::train::TrainOutput;

/// Score of classifier `exit` with every instance forced through it.
pub fn evaluate_classifier(
    model: &MultiExitModel,
    exit: usize,
    dataset: &Dataset,
    metric: Metric,
    batch_size: usize,
    threads: usize,
) -> Result<f64> {
    model.topology.check_exit(exit)?;
    let table = ExitTable::from_model(model, dataset, batch_size, threads)?;
    score(metric, &table.predictions(exit), &dataset.labels(), dataset.n_classes)
}

/// Per-exit standalone scores of a trained regime; a cascade's exit `i` is
/// the final classifier of its `i`-th model.
pub fn regime_scores(
    output: &TrainOutput,
    dataset: &Dataset,
    metric: Metric,
    batch_size: usize,
    threads: usize,
) -> Result<Vec<f64>> {
    let table = exit_table(output, dataset, batch_size, threads)?;
    let labels = dataset.labels();
    (1..=table.num_exits())
        .map(|e| score(metric, &table.predictions(e), &labels, dataset.n_classes))
        .collect()
}

/// Classifier outputs of a trained regime.
pub fn exit_table(output: &TrainOutput, dataset: &Dataset, batch_size: usize, threads: usize) -> Result<ExitTable> {
    if output.models.len() == 1 {
        ExitTable::from_model(&output.models[0], dataset, batch_size, threads)
    } else {
        ExitTable::from_cascade(&output.models, dataset, batch_size, threads)
    }
}

/// Speedup accounting that matches how a trained regime runs.
pub fn speedup_mode(output: &TrainOutput) -> SpeedupMode {
    if output.models.len() == 1 {
        SpeedupMode::EarlyExit
    } else {
        SpeedupMode::MultiModel
    }
}
