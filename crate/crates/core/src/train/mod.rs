//! Fine-tuning under the three regimes.
//!
//! * Early-Exit: one model, loss is the unweighted sum of every exit's
//!   cross-entropy.
//! * SWEET: same model and summed loss, but each segment's backbone input is
//!   gated so loss `i` stops at layer `L_{i-1}` and every parameter is
//!   updated by exactly one classifier.
//! * Multi-Model: one independent single-exit model per exit depth, trained
//!   one after the other on the same data order.

mod optim;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use optim::{adamw_step, clip_grad_norm, linear_lr, AdamW, OptimizerState};

use crate::autograd::{GradientMap, Tape, Tensor, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Batch, ExitTopology, ForwardGraph, Gating, ModelConfig, MultiExitModel};
use crate::rng::{derive_seed, stream_rng, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "ee")]
    EarlyExit,
    #[serde(rename = "mm")]
    MultiModel,
    #[serde(rename = "sweet")]
    Sweet,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::EarlyExit, Regime::Sweet, Regime::MultiModel];

    pub fn short_name(self) -> &'static str {
        match self {
            Regime::EarlyExit => "ee",
            Regime::MultiModel => "mm",
            Regime::Sweet => "sweet",
        }
    }

    fn gating(self) -> Gating {
        match self {
            Regime::Sweet => Gating::SegmentBoundaries,
            Regime::EarlyExit | Regime::MultiModel => Gating::None,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ee" | "early-exit" | "earlyexit" => Ok(Regime::EarlyExit),
            "mm" | "multi-model" | "multimodel" => Ok(Regime::MultiModel),
            "sweet" => Ok(Regime::Sweet),
            other => Err(Error::validation(format!(
                "unknown regime {other:?} (expected ee, mm or sweet)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegimeConfig {
    pub regime: Regime,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    /// Multi-Model only: initialize sub-model `i` from the full model's
    /// embeddings, layers `1..=L_i` and head `i` instead of an independent
    /// `init_seed ⊕ L_i` draw.
    #[serde(default)]
    pub aligned_init: bool,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

impl Default for RegimeConfig {
    fn default() -> Self {
        Self {
            regime: Regime::EarlyExit,
            learning_rate: 3e-3,
            batch_size: 16,
            epochs: 2,
            seed: 0,
            warmup_steps: 0,
            weight_decay: 0.0,
            max_grad_norm: None,
            beta1: default_beta1(),
            beta2: default_beta2(),
            aligned_init: false,
        }
    }
}

impl RegimeConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.learning_rate > 0.0) {
            problems.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            problems.push("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".into());
        }
        if self.weight_decay < 0.0 {
            problems.push("weight_decay must be non-negative".into());
        }
        if matches!(self.max_grad_norm, Some(n) if !(n > 0.0)) {
            problems.push("max_grad_norm must be positive when set".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        self.epochs * self.steps_per_epoch(dataset_len)
    }
}

/// Instance order for `epoch`: a seeded shuffle, identical for every regime
/// that shares the seed.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = stream_rng(derive_seed(seed, epoch as u64), streams::SHUFFLE);
    order.shuffle(&mut rng);
    order
}

/// All training batches, epoch by epoch, as dataset indices.
pub fn batch_schedule(len: usize, config: &RegimeConfig) -> Vec<Vec<usize>> {
    (0..config.epochs)
        .flat_map(|epoch| {
            let order = epoch_order(len, config.seed, epoch);
            order
                .chunks(config.batch_size)
                .map(<[usize]>::to_vec)
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Unweighted sum of per-exit mean cross-entropies.
pub fn loss_early_exit(tape: &mut Tape, exit_logits: &[Var], labels: &[usize]) -> Result<Var> {
    let terms = exit_losses(tape, exit_logits, labels)?;
    tape.sum_losses(&terms)
}

/// Cross-entropy of each exit, in exit order.
pub fn exit_losses(tape: &mut Tape, exit_logits: &[Var], labels: &[usize]) -> Result<Vec<Var>> {
    if exit_logits.is_empty() {
        return Err(Error::validation("need at least one exit"));
    }
    exit_logits
        .iter()
        .map(|&l| tape.cross_entropy(l, labels))
        .collect()
}

/// Gradients of the summed exit losses on a graph built with
/// [`Gating::SegmentBoundaries`]: each loss's backward pass stops at the
/// previous exit's layer and all contributions land in one map.
pub fn backward_sweet(
    tape: &mut Tape,
    graph: &ForwardGraph,
    labels: &[usize],
    topology: &ExitTopology,
) -> Result<GradientMap> {
    check_exits(graph, topology)?;
    Ok(summed_backward(tape, graph, labels)?.0)
}

fn check_exits(graph: &ForwardGraph, topology: &ExitTopology) -> Result<()> {
    if graph.exit_logits.len() != topology.num_exits() {
        return Err(Error::validation(format!(
            "graph has {} exits but topology has {}",
            graph.exit_logits.len(),
            topology.num_exits()
        )));
    }
    Ok(())
}

fn summed_backward(
    tape: &mut Tape,
    graph: &ForwardGraph,
    labels: &[usize],
) -> Result<(GradientMap, Vec<f64>)> {
    let terms = exit_losses(tape, &graph.exit_logits, labels)?;
    let values = terms.iter().map(|&t| tape.value(t).data()[0]).collect();
    let total = tape.sum_losses(&terms)?;
    Ok((tape.backward(total)?, values))
}

/// Per-parameter gradients (indexed like the parameter store) plus the
/// value of each exit loss, for one batch.
#[derive(Debug, Clone)]
pub struct StepGradients {
    pub grads: Vec<Tensor>,
    pub exit_losses: Vec<f64>,
}

/// Summed-loss gradients for one batch; with [`Gating::SegmentBoundaries`]
/// this is [`backward_sweet`].
pub fn compute_gradients(
    model: &MultiExitModel,
    batch: &Batch,
    labels: &[usize],
    gating: Gating,
) -> Result<StepGradients> {
    let mut tape = Tape::new();
    let graph = model.build_graph(&mut tape, batch, gating, true)?;
    check_exits(&graph, &model.topology)?;
    let (map, exit_losses) = summed_backward(&mut tape, &graph, labels)?;
    Ok(StepGradients {
        grads: params_in_order(&map, &graph, model),
        exit_losses,
    })
}

fn params_in_order(map: &GradientMap, graph: &ForwardGraph, model: &MultiExitModel) -> Vec<Tensor> {
    graph
        .params
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            map.get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(model.params.get(i).tensor.shape()))
        })
        .collect()
}

/// Gradient of each exit loss alone, on a shared forward pass built with
/// `gating`. Outer index is the exit (0-based), inner the parameter.
pub fn per_exit_gradients(
    model: &MultiExitModel,
    batch: &Batch,
    labels: &[usize],
    gating: Gating,
) -> Result<Vec<Vec<Tensor>>> {
    let mut tape = Tape::new();
    let graph = model.build_graph(&mut tape, batch, gating, true)?;
    let losses = exit_losses(&mut tape, &graph.exit_logits, labels)?;
    losses
        .iter()
        .map(|&l| Ok(params_in_order(&tape.backward(l)?, &graph, model)))
        .collect()
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub exit_losses: Vec<f64>,
    pub lr: f64,
    pub regime: Regime,
    /// Multi-Model only: 1-based index of the sub-model being trained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub_model: Option<usize>,
}

/// Optimizer loop for a single model.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: MultiExitModel,
    config: RegimeConfig,
    gating: Gating,
    state: OptimizerState,
    total_steps: usize,
    step: usize,
    sub_model: Option<usize>,
}

impl Trainer {
    pub fn new(model: MultiExitModel, config: &RegimeConfig, total_steps: usize) -> Self {
        let state = OptimizerState::new(&model.params);
        Self {
            gating: config.regime.gating(),
            model,
            config: config.clone(),
            state,
            total_steps,
            step: 0,
            sub_model: None,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.state
    }

    /// One optimizer step on `batch`. Aborts on a non-finite loss.
    pub fn step(&mut self, batch: &Batch, labels: &[usize]) -> Result<StepRecord> {
        let StepGradients {
            mut grads,
            exit_losses,
        } = compute_gradients(&self.model, batch, labels, self.gating)?;
        if let Some(bad) = exit_losses.iter().find(|l| !l.is_finite()) {
            return Err(Error::Diverged {
                step: self.step,
                regime: self.config.regime.to_string(),
                loss: *bad,
            });
        }
        if let Some(max) = self.config.max_grad_norm {
            clip_grad_norm(&mut grads, max);
        }
        let lr = linear_lr(
            self.config.learning_rate,
            self.step,
            self.total_steps,
            self.config.warmup_steps,
        );
        adamw_step(
            &mut self.model.params,
            &grads,
            &mut self.state,
            lr,
            &self.config.adamw(),
        );
        let record = StepRecord {
            step: self.step,
            exit_losses,
            lr,
            regime: self.config.regime,
            sub_model: self.sub_model,
        };
        self.step += 1;
        Ok(record)
    }

    /// Runs every scheduled batch of `dataset`.
    pub fn fit(&mut self, dataset: &Dataset, log: &mut Vec<StepRecord>) -> Result<()> {
        for indices in batch_schedule(dataset.len(), &self.config) {
            let (batch, labels) = dataset.batch(&indices)?;
            log.push(self.step(&batch, &labels)?);
        }
        Ok(())
    }
}

/// Result of [`train`]: one model for Early-Exit and SWEET, one per exit
/// depth for Multi-Model.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub regime: Regime,
    pub models: Vec<MultiExitModel>,
    pub log: Vec<StepRecord>,
}

/// Initial models for a regime, before any training.
pub fn initial_models(config: &RegimeConfig, model_config: &ModelConfig) -> Result<Vec<MultiExitModel>> {
    let full = MultiExitModel::init(model_config.clone())?;
    match config.regime {
        Regime::EarlyExit | Regime::Sweet => Ok(vec![full]),
        Regime::MultiModel => (1..=full.num_exits())
            .map(|exit| {
                if config.aligned_init {
                    full.prefix_model(exit)
                } else {
                    let depth = full.topology.exit_layer(exit);
                    MultiExitModel::init(model_config.truncated(depth))
                }
            })
            .collect(),
    }
}

pub fn train(config: &RegimeConfig, model_config: &ModelConfig, dataset: &Dataset) -> Result<TrainOutput> {
    config.validate()?;
    model_config.validate()?;
    if dataset.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    if dataset.n_classes != model_config.n_classes {
        return Err(Error::validation(format!(
            "dataset has {} classes but the model has {}",
            dataset.n_classes, model_config.n_classes
        )));
    }
    let total = config.total_steps(dataset.len());
    let mut log = Vec::new();
    let mut models = Vec::new();
    let multi = config.regime == Regime::MultiModel;
    for (i, model) in initial_models(config, model_config)?.into_iter().enumerate() {
        let mut trainer = Trainer::new(model, config, total);
        if multi {
            trainer.sub_model = Some(i + 1);
        }
        trainer.fit(dataset, &mut log)?;
        models.push(trainer.model);
    }
    Ok(TrainOutput {
        regime: config.regime,
        models,
        log,
    })
}
