//! Inference-time exit policies.
//!
//! An early-exit model evaluates its classifiers in order on one growing
//! forward pass and stops at the first one the policy accepts. A cascade runs
//! independent models smallest first and throws away each one's computation
//! when it escalates. The final classifier always accepts.

mod calibrate;
mod gates;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use calibrate::{calibrate_temperature, mean_nll, select_temperature, temperature_grid};
pub use gates::{fit_gate, gate_training_set, train_lte_gates, Gate, GateConfig};

use crate::autograd::kernels::softmax;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ExitTopology, IncrementalForward, MultiExitModel};
use crate::parallel::map_ordered;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Confidence,
    #[serde(rename = "lte")]
    LearnToExit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExitCriterion {
    /// Max softmax probability of `logits / T_i`.
    Confidence { temperatures: Vec<f64> },
    /// Gate score on the exit's pooled hidden state.
    #[serde(rename = "lte")]
    LearnToExit { gates: Vec<Gate> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitPolicy {
    pub criterion: ExitCriterion,
    pub threshold: f64,
}

impl ExitPolicy {
    /// Confidence policy with every temperature at 1.
    pub fn confidence(num_exits: usize, threshold: f64) -> Self {
        Self {
            criterion: ExitCriterion::Confidence {
                temperatures: vec![1.0; num_exits],
            },
            threshold,
        }
    }

    pub fn with_temperatures(temperatures: Vec<f64>, threshold: f64) -> Self {
        Self {
            criterion: ExitCriterion::Confidence { temperatures },
            threshold,
        }
    }

    pub fn learn_to_exit(gates: Vec<Gate>, threshold: f64) -> Self {
        Self {
            criterion: ExitCriterion::LearnToExit { gates },
            threshold,
        }
    }

    pub fn with_threshold(&self, threshold: f64) -> Self {
        Self {
            criterion: self.criterion.clone(),
            threshold,
        }
    }

    pub fn kind(&self) -> PolicyKind {
        match self.criterion {
            ExitCriterion::Confidence { .. } => PolicyKind::Confidence,
            ExitCriterion::LearnToExit { .. } => PolicyKind::LearnToExit,
        }
    }

    pub fn num_exits(&self) -> usize {
        match &self.criterion {
            ExitCriterion::Confidence { temperatures } => temperatures.len(),
            ExitCriterion::LearnToExit { gates } => gates.len(),
        }
    }

    pub fn validate(&self, num_exits: usize) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::validation(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        if self.num_exits() != num_exits {
            return Err(Error::validation(format!(
                "policy has {} exits, model has {num_exits}",
                self.num_exits()
            )));
        }
        match &self.criterion {
            ExitCriterion::Confidence { temperatures } => {
                if let Some(t) = temperatures.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
                    return Err(Error::validation(format!("temperature {t} must be positive")));
                }
            }
            ExitCriterion::LearnToExit { gates } => {
                for g in gates {
                    g.validate()?;
                }
            }
        }
        Ok(())
    }

    /// Score compared against the threshold at `exit` (1-based).
    pub fn score(&self, exit: usize, logits: &[f64], pooled: &[f64]) -> f64 {
        match &self.criterion {
            ExitCriterion::Confidence { temperatures } => confidence(logits, temperatures[exit - 1]),
            ExitCriterion::LearnToExit { gates } => gates[exit - 1].score(pooled),
        }
    }

    pub fn accepts(&self, exit: usize, score: f64) -> bool {
        exit == self.num_exits() || score >= self.threshold
    }
}

/// Maximum softmax probability of `logits / temperature`.
pub fn confidence(logits: &[f64], temperature: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    softmax(&scaled).into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// Index of the largest logit, first on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Outcome of one instance under a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitTrace {
    pub id: usize,
    pub exit: usize,
    pub layers_ee: usize,
    pub layers_mm: usize,
    pub pred: usize,
    pub conf: f64,
    pub correct: Option<bool>,
}

impl ExitTrace {
    /// `layers` lists the exit depths `L_1..L_M`.
    pub fn new(
        id: usize,
        exit: usize,
        layers: &[usize],
        pred: usize,
        conf: f64,
        label: Option<usize>,
    ) -> Self {
        Self {
            id,
            exit,
            layers_ee: layers[exit - 1],
            layers_mm: layers[..exit].iter().sum(),
            pred,
            conf,
            correct: label.map(|y| y == pred),
        }
    }
}

/// Walks exits in order, asking `step` for each exit's logits and pooled
/// state, until the policy accepts.
fn run_policy<F>(policy: &ExitPolicy, mut step: F) -> Result<(usize, usize, f64)>
where
    F: FnMut(usize) -> Result<(Vec<f64>, Vec<f64>)>,
{
    for exit in 1..=policy.num_exits() {
        let (logits, pooled) = step(exit)?;
        let score = policy.score(exit, &logits, &pooled);
        if policy.accepts(exit, score) {
            return Ok((exit, argmax(&logits), score));
        }
    }
    unreachable!("the final exit always accepts")
}

/// Early-exit prediction for one instance. Also returns the number of
/// encoder layers actually run.
pub fn predict_early_exit_counted(
    model: &MultiExitModel,
    policy: &ExitPolicy,
    id: usize,
    tokens: &[usize],
    label: Option<usize>,
) -> Result<(ExitTrace, usize)> {
    policy.validate(model.num_exits())?;
    let mut run = IncrementalForward::new(model, tokens)?;
    let (exit, pred, conf) = run_policy(policy, |exit| {
        let s = run.advance_to(exit)?;
        Ok((s.logits, s.pooled))
    })?;
    let trace = ExitTrace::new(id, exit, model.topology.exit_layers(), pred, conf, label);
    Ok((trace, run.layers_executed()))
}

pub fn predict_early_exit(
    model: &MultiExitModel,
    policy: &ExitPolicy,
    id: usize,
    tokens: &[usize],
    label: Option<usize>,
) -> Result<ExitTrace> {
    predict_early_exit_counted(model, policy, id, tokens, label).map(|(t, _)| t)
}

/// Depths of a cascade's models, checked to be strictly increasing.
pub fn cascade_layers(models: &[MultiExitModel]) -> Result<Vec<usize>> {
    let depths: Vec<usize> = models.iter().map(|m| m.config.n_layers).collect();
    ExitTopology::new(depths.clone())?;
    Ok(depths)
}

/// Cascade prediction for one instance; each model runs in full to its last
/// classifier. Also returns the total number of layers run.
pub fn predict_cascade_counted(
    models: &[MultiExitModel],
    policy: &ExitPolicy,
    id: usize,
    tokens: &[usize],
    label: Option<usize>,
) -> Result<(ExitTrace, usize)> {
    let layers = cascade_layers(models)?;
    policy.validate(models.len())?;
    let mut total = 0;
    let (exit, pred, conf) = run_policy(policy, |i| {
        let model = &models[i - 1];
        let mut run = IncrementalForward::new(model, tokens)?;
        let s = run.advance_to(model.num_exits())?;
        total += run.layers_executed();
        Ok((s.logits, s.pooled))
    })?;
    Ok((ExitTrace::new(id, exit, &layers, pred, conf, label), total))
}

pub fn predict_cascade(
    models: &[MultiExitModel],
    policy: &ExitPolicy,
    id: usize,
    tokens: &[usize],
    label: Option<usize>,
) -> Result<ExitTrace> {
    predict_cascade_counted(models, policy, id, tokens, label).map(|(t, _)| t)
}

/// Every classifier's output for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceOutputs {
    pub id: usize,
    pub label: Option<usize>,
    pub logits: Vec<Vec<f64>>,
    pub pooled: Vec<Vec<f64>>,
}

/// Classifier outputs for a whole dataset, computed once so a threshold
/// sweep only re-applies the decision rule. Exiting at classifier `i` of a
/// table gives the same trace as running the policy incrementally.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitTable {
    /// Exit depths `L_1..L_M`.
    pub layers: Vec<usize>,
    pub rows: Vec<InstanceOutputs>,
}

impl ExitTable {
    pub fn num_exits(&self) -> usize {
        self.layers.len()
    }

    /// Batched all-exit forward of an early-exit model.
    pub fn from_model(
        model: &MultiExitModel,
        dataset: &Dataset,
        batch_size: usize,
        threads: usize,
    ) -> Result<Self> {
        let layers = model.topology.exit_layers().to_vec();
        let chunks: Vec<Vec<usize>> = dataset.chunks(batch_size.max(1)).collect();
        let parts = map_ordered(&chunks, threads, |idx| -> Result<Vec<InstanceOutputs>> {
            let (batch, labels) = dataset.batch(idx)?;
            let out = model.forward_all_exits(&batch)?;
            Ok(idx
                .iter()
                .enumerate()
                .map(|(b, &i)| InstanceOutputs {
                    id: dataset.instances[i].id,
                    label: Some(labels[b]),
                    logits: out.logits.iter().map(|l| l.row(b).to_vec()).collect(),
                    pooled: layers
                        .iter()
                        .map(|&l| out.hidden[l].row(b * batch.seq_len).to_vec())
                        .collect(),
                })
                .collect())
        });
        let mut rows = Vec::with_capacity(dataset.len());
        for p in parts {
            rows.extend(p?);
        }
        Ok(Self { layers, rows })
    }

    /// Final-classifier outputs of each cascade model.
    pub fn from_cascade(
        models: &[MultiExitModel],
        dataset: &Dataset,
        batch_size: usize,
        threads: usize,
    ) -> Result<Self> {
        let layers = cascade_layers(models)?;
        let tables = models
            .iter()
            .map(|m| Self::from_model(m, dataset, batch_size, threads))
            .collect::<Result<Vec<_>>>()?;
        let rows = (0..dataset.len())
            .map(|r| InstanceOutputs {
                id: tables[0].rows[r].id,
                label: tables[0].rows[r].label,
                logits: tables.iter().map(|t| t.rows[r].logits.last().expect("one exit").clone()).collect(),
                pooled: tables.iter().map(|t| t.rows[r].pooled.last().expect("one exit").clone()).collect(),
            })
            .collect();
        Ok(Self { layers, rows })
    }

    pub fn trace(&self, row: usize, policy: &ExitPolicy) -> ExitTrace {
        let r = &self.rows[row];
        let (exit, pred, conf) = run_policy(policy, |e| Ok((r.logits[e - 1].clone(), r.pooled[e - 1].clone())))
            .expect("table lookups cannot fail");
        ExitTrace::new(r.id, exit, &self.layers, pred, conf, r.label)
    }

    pub fn traces(&self, policy: &ExitPolicy) -> Result<Vec<ExitTrace>> {
        policy.validate(self.num_exits())?;
        Ok((0..self.rows.len()).map(|r| self.trace(r, policy)).collect())
    }

    /// Argmax predictions of classifier `exit` for every row.
    pub fn predictions(&self, exit: usize) -> Vec<usize> {
        self.rows.iter().map(|r| argmax(&r.logits[exit - 1])).collect()
    }

    pub fn labels(&self) -> Result<Vec<usize>> {
        self.rows
            .iter()
            .map(|r| r.label.ok_or_else(|| Error::validation("instance without a label")))
            .collect()
    }
}

pub fn write_traces(path: &Path, traces: &[ExitTrace]) -> Result<()> {
    let mut out = Vec::new();
    for t in traces {
        serde_json::to_writer(&mut out, t)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_traces(path: &Path) -> Result<Vec<ExitTrace>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
