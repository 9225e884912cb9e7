use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::curve::{sweep, target_ratios, threshold_grid, CurveSet};
use super::metrics::{mean_std, Metric};
use super::{exit_table, regime_scores, speedup_mode};
use crate::data::{subsample, Dataset};
use crate::error::{Error, Result};
use crate::exit::{calibrate_temperature, train_lte_gates, ExitPolicy, GateConfig, PolicyKind};
use crate::model::{ExitTopology, ModelConfig};
use crate::parallel::map_ordered;
use crate::rng::derive_seed;
use crate::train::{train, Regime, RegimeConfig, TrainOutput};

const RERUN_SALT: u64 = 0x0052_4552_554e;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareConfig {
    pub model: ModelConfig,
    /// Shared hyper-parameters; `regime` and `seed` are overridden per run.
    pub training: RegimeConfig,
    pub regimes: Vec<Regime>,
    pub seeds: Vec<u64>,
    /// Training-set sizes to sweep; empty means the whole training set.
    pub train_sizes: Vec<usize>,
    pub metric: Metric,
    pub policies: Vec<PolicyKind>,
    pub eval_batch_size: usize,
    pub gate: GateConfig,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            training: RegimeConfig::default(),
            regimes: Regime::ALL.to_vec(),
            seeds: vec![0],
            train_sizes: Vec::new(),
            metric: Metric::Accuracy,
            policies: vec![PolicyKind::Confidence],
            eval_batch_size: 64,
            gate: GateConfig::default(),
        }
    }
}

impl CompareConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(Error::Config(p)) = self.model.validate() {
            problems.extend(p);
        }
        if let Err(Error::Config(p)) = self.training.validate() {
            problems.extend(p);
        }
        if self.regimes.is_empty() {
            problems.push("regimes must not be empty".into());
        }
        if self.seeds.is_empty() {
            problems.push("seeds must not be empty".into());
        }
        if self.train_sizes.contains(&0) {
            problems.push("train sizes must be positive".into());
        }
        if self.eval_batch_size == 0 {
            problems.push("eval_batch_size must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub regime: Regime,
    pub exit: usize,
    pub seed: u64,
    pub train_size: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub regime: Regime,
    pub exit: usize,
    pub train_size: usize,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

/// What happened to one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub regime: Regime,
    pub seed: u64,
    pub train_size: usize,
    pub diverged: bool,
    /// Divergence message of the original run, if any.
    pub divergence: Option<String>,
    /// Seed of the replacement run after a divergence.
    pub rerun_seed: Option<u64>,
    /// True when the rerun diverged too; the seed then has no scores.
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedCurve {
    pub seed: u64,
    pub train_size: usize,
    pub curve: CurveSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ScoreRow>,
    pub summary: Vec<SummaryRow>,
    pub runs: Vec<RunRecord>,
    pub curves: Vec<SeedCurve>,
}

struct Job {
    seed: u64,
    train_size: usize,
}

/// Trains every regime for every seed (and training-set size) on the same
/// subsample and data order, then scores each classifier on `validation`.
/// Seeds may run on separate threads; results do not depend on it.
pub fn compare_regimes(
    config: &CompareConfig,
    train_set: &Dataset,
    validation: &Dataset,
    threads: usize,
) -> Result<Comparison> {
    config.validate()?;
    let sizes = if config.train_sizes.is_empty() {
        vec![train_set.len()]
    } else {
        config.train_sizes.clone()
    };
    let jobs: Vec<Job> = sizes
        .iter()
        .flat_map(|&train_size| config.seeds.iter().map(move |&seed| Job { seed, train_size }))
        .collect();
    let results = map_ordered(&jobs, threads, |job| run_job(config, job, train_set, validation));

    let mut out = Comparison {
        rows: Vec::new(),
        summary: Vec::new(),
        runs: Vec::new(),
        curves: Vec::new(),
    };
    for r in results {
        let (rows, runs, curves) = r?;
        out.rows.extend(rows);
        out.runs.extend(runs);
        out.curves.extend(curves);
    }
    for &train_size in &sizes {
        for &regime in &config.regimes {
            for exit in 1..=config.model.exit_layers.len() {
                let scores: Vec<f64> = out
                    .rows
                    .iter()
                    .filter(|r| r.regime == regime && r.exit == exit && r.train_size == train_size)
                    .map(|r| r.score)
                    .collect();
                let (mean, std) = mean_std(&scores);
                out.summary.push(SummaryRow {
                    regime,
                    exit,
                    train_size,
                    mean,
                    std,
                    n_seeds: scores.len(),
                });
            }
        }
    }
    Ok(out)
}

type JobResult = (Vec<ScoreRow>, Vec<RunRecord>, Vec<SeedCurve>);

fn run_job(config: &CompareConfig, job: &Job, train_set: &Dataset, validation: &Dataset) -> Result<JobResult> {
    let data = subsample(train_set, job.train_size, job.seed);
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    let mut curves = Vec::new();
    for &regime in &config.regimes {
        let mut record = RunRecord {
            regime,
            seed: job.seed,
            train_size: job.train_size,
            diverged: false,
            divergence: None,
            rerun_seed: None,
            excluded: false,
        };
        let output = match train_seeded(config, regime, job.seed, &data) {
            Ok(o) => Some(o),
            Err(e @ Error::Diverged { .. }) => {
                log::warn!("{regime} seed {} diverged: {e}; rerunning", job.seed);
                record.diverged = true;
                record.divergence = Some(e.to_string());
                let rerun = derive_seed(job.seed, RERUN_SALT);
                record.rerun_seed = Some(rerun);
                match train_seeded(config, regime, rerun, &data) {
                    Ok(o) => Some(o),
                    Err(Error::Diverged { .. }) => {
                        record.excluded = true;
                        None
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(e) => return Err(e),
        };
        runs.push(record);
        let Some(output) = output else { continue };
        let scores = regime_scores(&output, validation, config.metric, config.eval_batch_size, 1)?;
        for (i, score) in scores.into_iter().enumerate() {
            rows.push(ScoreRow {
                regime,
                exit: i + 1,
                seed: job.seed,
                train_size: job.train_size,
                score,
            });
        }
        for &kind in &config.policies {
            curves.push(SeedCurve {
                seed: job.seed,
                train_size: job.train_size,
                curve: regime_curve(config, regime, &output, &data, validation, kind)?,
            });
        }
    }
    Ok((rows, runs, curves))
}

fn train_seeded(config: &CompareConfig, regime: Regime, seed: u64, data: &Dataset) -> Result<TrainOutput> {
    let training = RegimeConfig {
        regime,
        seed,
        ..config.training.clone()
    };
    let model = ModelConfig {
        init_seed: seed,
        ..config.model.clone()
    };
    train(&training, &model, data)
}

/// Temperatures and gates are fitted on the training data; the sweep runs on
/// `validation`.
fn regime_curve(
    config: &CompareConfig,
    regime: Regime,
    output: &TrainOutput,
    fit_data: &Dataset,
    validation: &Dataset,
    kind: PolicyKind,
) -> Result<CurveSet> {
    let b = config.eval_batch_size;
    let fit_table = exit_table(output, fit_data, b, 1)?;
    let policy = match kind {
        PolicyKind::Confidence => ExitPolicy::with_temperatures(calibrate_temperature(&fit_table)?, 0.5),
        PolicyKind::LearnToExit => ExitPolicy::learn_to_exit(train_lte_gates(&fit_table, &config.gate)?, 0.5),
    };
    let table = exit_table(output, validation, b, 1)?;
    let mode = speedup_mode(output);
    let grid = threshold_grid(validation.n_classes)?;
    let points = sweep(&table, &policy, &grid, mode, config.metric, validation.n_classes)?;
    let depth = ExitTopology::new(table.layers.clone())?.depth();
    Ok(CurveSet::new(regime.short_name(), kind, mode, points, &target_ratios(depth, mode)))
}

/// `regime,exit,seed,score`.
pub fn comparison_csv(rows: &[ScoreRow]) -> String {
    let mut out = String::from("regime,exit,seed,score\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.regime.short_name(), r.exit, r.seed, r.score);
    }
    out
}
