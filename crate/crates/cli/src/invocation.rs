//! Fully resolved commands. A resolved invocation has absolute paths and
//! every default filled in, so it can be stored in a manifest and replayed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sweetexit::data::{
    generate_synthetic, load_splits, render_text, subsample, DataFormat, Dataset, SyntheticTaskSpec,
};
use sweetexit::diagnostics::{conflict_reports, DEFAULT_PROBE};
use sweetexit::eval::{
    compare_regimes, comparison_csv, curve_csv, exit_table, regime_scores, speedup_mode, sweep, target_ratios,
    threshold_grid, CompareConfig, CurveSet, Metric,
};
use sweetexit::exit::{calibrate_temperature, train_lte_gates, write_traces, ExitPolicy, GateConfig, PolicyKind};
use sweetexit::model::{checkpoint, ExitTopology, ModelConfig};
use sweetexit::parallel::threads_from_env;
use sweetexit::rng::streams;
use sweetexit::train::{train, Regime, RegimeConfig};
use sweetexit::{Error, Result};

use crate::files;
use crate::model_dir::{checkpoint_names, ModelDir, RunInfo, LOG_FILE, RUN_FILE, VOCAB_FILE};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TEMPERATURE_FILE: &str = "temperatures.json";
pub const CONFLICT_FILE: &str = "conflict_report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataSpec {
    #[serde(flatten)]
    pub task: SyntheticTaskSpec,
    #[serde(default = "default_validation_size")]
    pub validation_size: usize,
}

fn default_validation_size() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DataConfig {
    pub train: PathBuf,
    pub validation: Option<PathBuf>,
    pub format: Option<DataFormat>,
}

impl DataConfig {
    fn resolve(&self, base: &Path) -> Result<Self> {
        if self.train.as_os_str().is_empty() {
            return Err(Error::Config(vec!["data.train is required".into()]));
        }
        let train = files::input_path(&self.train, base)?;
        let format = match self.format {
            Some(f) => f,
            None => DataFormat::from_path(&train).ok_or_else(|| {
                Error::Config(vec![format!("cannot tell the format of {}; set data.format", train.display())])
            })?,
        };
        Ok(Self {
            validation: self.validation.as_ref().map(|v| files::input_path(v, base)).transpose()?,
            train,
            format: Some(format),
        })
    }

    fn paths(&self) -> Vec<PathBuf> {
        std::iter::once(self.train.clone()).chain(self.validation.clone()).collect()
    }

    fn format(&self) -> DataFormat {
        self.format.expect("resolved")
    }
}

/// Loads both splits and sizes the model's vocabulary and label count from
/// the training data.
fn load_data(data: &DataConfig, model: &mut ModelConfig) -> Result<(sweetexit::data::Tokenizer, Vec<String>, Dataset, Option<Dataset>)> {
    let others: Vec<(&str, &Path)> = data.validation.iter().map(|v| ("validation", v.as_path())).collect();
    let (tokenizer, labels, train_set, mut rest) = load_splits(&data.train, &others, data.format(), model.max_seq_len)?;
    model.vocab_size = tokenizer.vocab_size();
    model.n_classes = labels.len();
    Ok((tokenizer, labels.names, train_set, rest.pop()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub training: RegimeConfig,
    pub data: DataConfig,
    /// Subsample the training split to this many instances.
    pub train_size: Option<usize>,
    pub metric: Metric,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            training: RegimeConfig::default(),
            data: DataConfig::default(),
            train_size: None,
            metric: Metric::Accuracy,
            eval_batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareFile {
    #[serde(flatten)]
    pub compare: CompareConfig,
    pub data: DataConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Invocation {
    GenData {
        spec: GenDataSpec,
        out: PathBuf,
    },
    Train {
        config: TrainConfig,
        out: PathBuf,
    },
    Eval {
        model: PathBuf,
        data: PathBuf,
        metric: Metric,
        batch_size: usize,
        out: PathBuf,
    },
    Curve {
        model: PathBuf,
        data: PathBuf,
        policy: PolicyKind,
        metric: Metric,
        temperatures: Option<PathBuf>,
        gate_data: Option<PathBuf>,
        gate: GateConfig,
        batch_size: usize,
        traces: bool,
        out: PathBuf,
    },
    Calibrate {
        model: PathBuf,
        data: PathBuf,
        batch_size: usize,
        out: PathBuf,
    },
    Conflict {
        model: PathBuf,
        data: PathBuf,
        batch_size: usize,
        seed: u64,
        matrix: String,
        out: PathBuf,
    },
    Compare {
        config: CompareFile,
        out: PathBuf,
    },
}

impl Invocation {
    pub fn gen_data(spec: &Path, out: &Path) -> Result<Self> {
        let spec: GenDataSpec = files::read_config(spec)?;
        spec.task.validate()?;
        Ok(Self::GenData { spec, out: files::output_path(out)? })
    }

    pub fn train(config: &Path, regime: Regime, out: &Path) -> Result<Self> {
        let mut cfg: TrainConfig = files::read_config(config)?;
        let base = files::parent_dir(&files::input_path(config, &files::cwd()?)?);
        cfg.data = cfg.data.resolve(&base)?;
        cfg.training.regime = regime;
        cfg.training.validate()?;
        load_data(&cfg.data, &mut cfg.model)?;
        cfg.model.validate()?;
        Ok(Self::Train { config: cfg, out: files::output_path(out)? })
    }

    pub fn eval(model: &Path, data: &Path, metric: Metric, batch_size: usize, out: &Path) -> Result<Self> {
        let cwd = files::cwd()?;
        Ok(Self::Eval {
            model: files::input_path(model, &cwd)?,
            data: files::input_path(data, &cwd)?,
            metric,
            batch_size: positive(batch_size, "batch size")?,
            out: files::output_path(out)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn curve(
        model: &Path,
        data: &Path,
        policy: PolicyKind,
        metric: Metric,
        temperatures: Option<&Path>,
        gate_data: Option<&Path>,
        batch_size: usize,
        traces: bool,
        out: &Path,
    ) -> Result<Self> {
        let cwd = files::cwd()?;
        let model = files::input_path(model, &cwd)?;
        let temperatures = match temperatures {
            Some(t) => Some(files::input_path(t, &cwd)?),
            None => Some(model.join(TEMPERATURE_FILE)).filter(|p| p.exists()),
        };
        let gate_data = match (policy, gate_data) {
            (PolicyKind::LearnToExit, Some(g)) => Some(files::input_path(g, &cwd)?),
            (PolicyKind::LearnToExit, None) => {
                let info: RunInfo = files::read_config(&model.join(RUN_FILE))?;
                Some(info.train_data)
            }
            (PolicyKind::Confidence, _) => None,
        };
        Ok(Self::Curve {
            data: files::input_path(data, &cwd)?,
            model,
            policy,
            metric,
            temperatures: temperatures.filter(|_| policy == PolicyKind::Confidence),
            gate_data,
            gate: GateConfig::default(),
            batch_size: positive(batch_size, "batch size")?,
            traces,
            out: files::output_path(out)?,
        })
    }

    pub fn calibrate(model: &Path, data: &Path, batch_size: usize, out: Option<&Path>) -> Result<Self> {
        let cwd = files::cwd()?;
        let model = files::input_path(model, &cwd)?;
        let out = match out {
            Some(o) => files::output_path(o)?,
            None => model.join(TEMPERATURE_FILE),
        };
        Ok(Self::Calibrate {
            data: files::input_path(data, &cwd)?,
            model,
            batch_size: positive(batch_size, "batch size")?,
            out,
        })
    }

    pub fn conflict(
        model: &Path,
        data: Option<&Path>,
        batch_size: usize,
        seed: u64,
        matrix: Option<&str>,
        out: Option<&Path>,
    ) -> Result<Self> {
        let cwd = files::cwd()?;
        let model = files::input_path(model, &cwd)?;
        let data = match data {
            Some(d) => files::input_path(d, &cwd)?,
            None => {
                let info: RunInfo = files::read_config(&model.join(RUN_FILE))?;
                info.validation_data.unwrap_or(info.train_data)
            }
        };
        let out = match out {
            Some(o) => files::output_path(o)?,
            None => model.join(CONFLICT_FILE),
        };
        Ok(Self::Conflict {
            model,
            data,
            batch_size: positive(batch_size, "batch size")?,
            seed,
            matrix: matrix.unwrap_or(DEFAULT_PROBE).to_string(),
            out,
        })
    }

    pub fn compare(config: &Path, seeds: Option<Vec<u64>>, out: &Path) -> Result<Self> {
        let mut cfg: CompareFile = files::read_config(config)?;
        let base = files::parent_dir(&files::input_path(config, &files::cwd()?)?);
        cfg.data = cfg.data.resolve(&base)?;
        if cfg.data.validation.is_none() {
            return Err(Error::Config(vec!["compare needs data.validation".into()]));
        }
        if let Some(seeds) = seeds {
            cfg.compare.seeds = seeds;
        }
        load_data(&cfg.data, &mut cfg.compare.model)?;
        cfg.compare.validate()?;
        Ok(Self::Compare { config: cfg, out: files::output_path(out)? })
    }

    pub fn out(&self) -> &Path {
        match self {
            Self::GenData { out, .. }
            | Self::Train { out, .. }
            | Self::Eval { out, .. }
            | Self::Curve { out, .. }
            | Self::Calibrate { out, .. }
            | Self::Conflict { out, .. }
            | Self::Compare { out, .. } => out,
        }
    }

    pub fn set_out(&mut self, path: PathBuf) {
        match self {
            Self::GenData { out, .. }
            | Self::Train { out, .. }
            | Self::Eval { out, .. }
            | Self::Curve { out, .. }
            | Self::Calibrate { out, .. }
            | Self::Conflict { out, .. }
            | Self::Compare { out, .. } => *out = path,
        }
    }

    fn writes_directory(&self) -> bool {
        matches!(self, Self::GenData { .. } | Self::Train { .. } | Self::Compare { .. })
    }

    /// `manifest.json` inside directory outputs, `<file>.manifest.json`
    /// beside file outputs.
    pub fn manifest_path(&self) -> PathBuf {
        let out = self.out();
        if self.writes_directory() {
            out.join(MANIFEST_FILE)
        } else {
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest.json");
            out.with_file_name(name)
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        match self {
            Self::GenData { spec, .. } => vec![spec.task.seed],
            Self::Train { config, .. } => vec![config.training.seed, config.model.init_seed],
            Self::Conflict { seed, .. } => vec![*seed],
            Self::Compare { config, .. } => config.compare.seeds.clone(),
            Self::Eval { .. } | Self::Curve { .. } | Self::Calibrate { .. } => Vec::new(),
        }
    }

    pub fn inputs(&self) -> Result<Vec<PathBuf>> {
        Ok(match self {
            Self::GenData { .. } => Vec::new(),
            Self::Train { config, .. } => config.data.paths(),
            Self::Compare { config, .. } => config.data.paths(),
            Self::Eval { model, data, .. } | Self::Calibrate { model, data, .. } | Self::Conflict { model, data, .. } => {
                let mut v = ModelDir::files(model)?;
                v.push(data.clone());
                v
            }
            Self::Curve { model, data, temperatures, gate_data, .. } => {
                let mut v = ModelDir::files(model)?;
                v.push(data.clone());
                v.extend(temperatures.clone());
                v.extend(gate_data.clone());
                v
            }
        })
    }

    pub fn execute(&self) -> Result<()> {
        match self {
            Self::GenData { spec, out } => gen_data(spec, out),
            Self::Train { config, out } => run_train(config, out),
            Self::Eval { model, data, metric, batch_size, out } => run_eval(model, data, *metric, *batch_size, out),
            Self::Curve { model, data, policy, metric, temperatures, gate_data, gate, batch_size, traces, out } => {
                run_curve(CurveJob {
                    model,
                    data,
                    policy: *policy,
                    metric: *metric,
                    temperatures: temperatures.as_deref(),
                    gate_data: gate_data.as_deref(),
                    gate,
                    batch_size: *batch_size,
                    traces: *traces,
                    out,
                })
            }
            Self::Calibrate { model, data, batch_size, out } => run_calibrate(model, data, *batch_size, out),
            Self::Conflict { model, data, batch_size, seed, matrix, out } => {
                run_conflict(model, data, *batch_size, *seed, matrix, out)
            }
            Self::Compare { config, out } => run_compare(config, out),
        }
    }
}

fn positive(n: usize, what: &str) -> Result<usize> {
    if n == 0 {
        Err(Error::Config(vec![format!("{what} must be positive")]))
    } else {
        Ok(n)
    }
}

fn render_split(spec: &SyntheticTaskSpec, ds: &Dataset) -> String {
    ds.instances
        .iter()
        .map(|i| format!("{}\t{}\n", render_text(spec, &i.tokens), i.label))
        .collect()
}

fn gen_data(spec: &GenDataSpec, out: &Path) -> Result<()> {
    let train_set = generate_synthetic(&spec.task, "train", streams::SYNTH_TRAIN)?;
    let val_spec = SyntheticTaskSpec { size: spec.validation_size, ..spec.task.clone() };
    let validation = generate_synthetic(&val_spec, "validation", streams::SYNTH_VALIDATION)?;
    files::write(&out.join("train.tsv"), render_split(&spec.task, &train_set))?;
    files::write(&out.join("validation.tsv"), render_split(&spec.task, &validation))?;
    log::info!("wrote {} training and {} validation instances to {}", train_set.len(), validation.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct ExitScore {
    exit: usize,
    layer: usize,
    score: f64,
}

#[derive(Serialize)]
struct ScoreReport {
    regime: Regime,
    metric: Metric,
    split: String,
    scores: Vec<ExitScore>,
}

fn score_report(
    output: &sweetexit::train::TrainOutput,
    exit_layers: &[usize],
    ds: &Dataset,
    metric: Metric,
    batch_size: usize,
) -> Result<ScoreReport> {
    let scores = regime_scores(output, ds, metric, batch_size, threads_from_env())?;
    Ok(ScoreReport {
        regime: output.regime,
        metric,
        split: ds.split.clone(),
        scores: scores
            .into_iter()
            .enumerate()
            .map(|(i, score)| ExitScore { exit: i + 1, layer: exit_layers[i], score })
            .collect(),
    })
}

fn run_train(config: &TrainConfig, out: &Path) -> Result<()> {
    let mut model_cfg = config.model.clone();
    let (tokenizer, labels, train_set, validation) = load_data(&config.data, &mut model_cfg)?;
    if model_cfg != config.model {
        return Err(Error::validation("training data no longer matches the resolved vocabulary or labels"));
    }
    let data = match config.train_size {
        Some(n) => subsample(&train_set, n, config.training.seed),
        None => train_set,
    };
    log::info!("training {} on {} instances", config.training.regime, data.len());
    let output = train(&config.training, &model_cfg, &data)?;

    let names = checkpoint_names(config.training.regime, model_cfg.exit_layers.len());
    for (model, name) in output.models.iter().zip(&names) {
        files::write(&out.join(name), checkpoint::to_bytes(model)?)?;
    }
    files::write(&out.join(VOCAB_FILE), tokenizer.to_json()? + "\n")?;
    let mut log_lines = String::new();
    for record in &output.log {
        log_lines.push_str(&serde_json::to_string(record)?);
        log_lines.push('\n');
    }
    files::write(&out.join(LOG_FILE), log_lines)?;
    let info = RunInfo {
        regime: config.training.regime,
        exit_layers: model_cfg.exit_layers.clone(),
        checkpoints: names,
        labels,
        format: config.data.format(),
        train_data: config.data.train.clone(),
        validation_data: config.data.validation.clone(),
        steps: output.log.len(),
    };
    files::write_json(&out.join(RUN_FILE), &info)?;
    if let Some(val) = validation {
        let report = score_report(&output, &model_cfg.exit_layers, &val, config.metric, config.eval_batch_size)?;
        files::write_json(&out.join("validation.json"), &report)?;
    }
    Ok(())
}

fn run_eval(model: &Path, data: &Path, metric: Metric, batch_size: usize, out: &Path) -> Result<()> {
    let dir = ModelDir::load(model)?;
    let ds = dir.load_data(data, "eval")?;
    let report = score_report(&dir.output(), &dir.info.exit_layers, &ds, metric, batch_size)?;
    files::write_json(out, &report)
}

struct CurveJob<'a> {
    model: &'a Path,
    data: &'a Path,
    policy: PolicyKind,
    metric: Metric,
    temperatures: Option<&'a Path>,
    gate_data: Option<&'a Path>,
    gate: &'a GateConfig,
    batch_size: usize,
    traces: bool,
    out: &'a Path,
}

#[derive(Serialize, Deserialize)]
struct Temperatures {
    temperatures: Vec<f64>,
}

fn run_curve(job: CurveJob<'_>) -> Result<()> {
    let dir = ModelDir::load(job.model)?;
    let threads = threads_from_env();
    let output = dir.output();
    let ds = dir.load_data(job.data, "eval")?;
    let table = exit_table(&output, &ds, job.batch_size, threads)?;
    let m = table.num_exits();
    let policy = match job.policy {
        PolicyKind::Confidence => match job.temperatures {
            Some(p) => ExitPolicy::with_temperatures(files::read_config::<Temperatures>(p)?.temperatures, 0.5),
            None => ExitPolicy::confidence(m, 0.5),
        },
        PolicyKind::LearnToExit => {
            let gate_set = dir.load_data(job.gate_data.expect("resolved"), "gate")?;
            let gate_table = exit_table(&output, &gate_set, job.batch_size, threads)?;
            ExitPolicy::learn_to_exit(train_lte_gates(&gate_table, job.gate)?, 0.5)
        }
    };
    policy.validate(m)?;
    let grid = threshold_grid(ds.n_classes)?;
    let mode = speedup_mode(&output);
    let points = sweep(&table, &policy, &grid, mode, job.metric, ds.n_classes)?;
    let depth = ExitTopology::new(table.layers.clone())?.depth();
    let curve = CurveSet::new(dir.info.regime.short_name(), job.policy, mode, points, &target_ratios(depth, mode));
    files::write(job.out, curve_csv(&curve.points, m))?;
    files::write_json(&job.out.with_extension("json"), &curve)?;
    if job.traces {
        let stem = job.out.file_stem().unwrap_or_default().to_string_lossy().to_string();
        let trace_dir = job.out.with_file_name(format!("{stem}_traces"));
        std::fs::create_dir_all(&trace_dir).map_err(|e| Error::io(&trace_dir, e))?;
        for (k, &t) in grid.iter().enumerate() {
            write_traces(&trace_dir.join(format!("t{:02}.jsonl", k + 1)), &table.traces(&policy.with_threshold(t))?)?;
        }
    }
    Ok(())
}

fn run_calibrate(model: &Path, data: &Path, batch_size: usize, out: &Path) -> Result<()> {
    let dir = ModelDir::load(model)?;
    let ds = dir.load_data(data, "calibration")?;
    let table = exit_table(&dir.output(), &ds, batch_size, threads_from_env())?;
    files::write_json(out, &Temperatures { temperatures: calibrate_temperature(&table)? })
}

fn run_conflict(model: &Path, data: &Path, batch_size: usize, seed: u64, matrix: &str, out: &Path) -> Result<()> {
    let dir = ModelDir::load(model)?;
    let backbone = dir.shared_backbone()?;
    let ds = subsample(&dir.load_data(data, "probe")?, batch_size, seed);
    let (batch, labels) = ds.batch(&(0..ds.len()).collect::<Vec<_>>())?;
    files::write_json(out, &conflict_reports(backbone, &batch, &labels, matrix)?)
}

fn run_compare(config: &CompareFile, out: &Path) -> Result<()> {
    let mut cfg = config.compare.clone();
    let (_, _, train_set, validation) = load_data(&config.data, &mut cfg.model)?;
    if cfg != config.compare {
        return Err(Error::validation("training data no longer matches the resolved vocabulary or labels"));
    }
    let validation = validation.ok_or_else(|| Error::Config(vec!["compare needs data.validation".into()]))?;
    let result = compare_regimes(&cfg, &train_set, &validation, threads_from_env())?;
    let mut sizes: Vec<usize> = result.rows.iter().map(|r| r.train_size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    if cfg.train_sizes.is_empty() {
        files::write(&out.join("comparison.csv"), comparison_csv(&result.rows))?;
    } else {
        for n in &sizes {
            let rows: Vec<_> = result.rows.iter().filter(|r| r.train_size == *n).cloned().collect();
            files::write(&out.join(format!("comparison_n{n}.csv")), comparison_csv(&rows))?;
        }
    }
    for c in &result.curves {
        let mut name = format!(
            "{}_{}_seed{}",
            c.curve.regime,
            serde_json::to_value(c.curve.policy)?.as_str().unwrap_or("policy"),
            c.seed
        );
        if !cfg.train_sizes.is_empty() {
            name.push_str(&format!("_n{}", c.train_size));
        }
        let m = c.curve.points.first().map_or(0, |p| p.counts.len());
        files::write(&out.join("curves").join(format!("{name}.csv")), curve_csv(&c.curve.points, m))?;
    }
    files::write_json(&out.join("summary.json"), &result)
}
