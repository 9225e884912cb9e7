use super::config::ModelConfig;
use super::params::{ParameterStore, LAYER_PARAM_NAMES};
use super::topology::ExitTopology;
use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const LAYERNORM_EPS: f64 = 1e-5;

const P_LN1_GAIN: usize = 0;
const P_LN1_BIAS: usize = 1;
const P_QUERY: usize = 2;
const P_KEY: usize = 4;
const P_VALUE: usize = 6;
const P_OUTPUT: usize = 8;
const P_LN2_GAIN: usize = 10;
const P_LN2_BIAS: usize = 11;
const P_FFN_IN: usize = 12;
const P_FFN_OUT: usize = 14;

/// A transformer encoder with a linear classifier after each exit layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiExitModel {
    pub config: ModelConfig,
    pub topology: ExitTopology,
    pub params: ParameterStore,
}

/// Padded token ids, `[batch, seq_len]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    /// `true` for real tokens, `false` for padding.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq_len: usize,
}

impl Batch {
    /// Right-pads each sequence with id 0 to the longest length.
    pub fn from_sequences<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        let seq_len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        if seqs.iter().any(|s| s.as_ref().is_empty()) {
            return Err(Error::validation("sequences must contain at least one token"));
        }
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut mask = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            let s = s.as_ref();
            ids.extend_from_slice(s);
            mask.extend(std::iter::repeat_n(true, s.len()));
            ids.extend(std::iter::repeat_n(0, seq_len - s.len()));
            mask.extend(std::iter::repeat_n(false, seq_len - s.len()));
        }
        Ok(Self {
            ids,
            mask,
            batch: seqs.len(),
            seq_len,
        })
    }

    pub fn has_padding(&self) -> bool {
        self.mask.iter().any(|m| !m)
    }
}

/// Where gradient gates go when building the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gating {
    /// Every loss reaches every parameter below its exit.
    None,
    /// The backbone input of each segment after the first passes through a
    /// gradient gate, so loss `i` stops at layer `L_{i-1}`. The classifier
    /// at `L_{i-1}` still reads the ungated hidden state.
    SegmentBoundaries,
}

/// Handles for one forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardGraph {
    /// Parameter leaves, indexed like the [`ParameterStore`].
    pub params: Vec<Var>,
    /// `h_0` (embeddings) through `h_N`, each `[batch * seq_len, d_model]`.
    pub hidden: Vec<Var>,
    /// One `[batch, n_classes]` logit matrix per exit.
    pub exit_logits: Vec<Var>,
}

/// Per-exit outputs of a gradient-free forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitOutputs {
    pub logits: Vec<Tensor>,
    pub hidden: Vec<Tensor>,
}

pub(crate) struct Binder<'m> {
    params: &'m ParameterStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'m> Binder<'m> {
    pub(crate) fn new(params: &'m ParameterStore, trainable: bool) -> Self {
        Self {
            params,
            vars: vec![None; params.len()],
            trainable,
        }
    }

    pub(crate) fn var(&mut self, tape: &mut Tape, index: usize) -> Var {
        *self.vars[index].get_or_insert_with(|| {
            tape.leaf(self.params.get(index).tensor.clone(), self.trainable)
        })
    }
}

impl MultiExitModel {
    /// Seeded initialization. See [`ParameterStore`] for the draw order.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let topology = ExitTopology::new(config.exit_layers.clone())?;
        let params = ParameterStore::initialize(&config, &topology);
        Ok(Self {
            config,
            topology,
            params,
        })
    }

    pub(crate) fn with_params(config: ModelConfig, params: ParameterStore) -> Result<Self> {
        config.validate()?;
        let topology = ExitTopology::new(config.exit_layers.clone())?;
        Ok(Self {
            config,
            topology,
            params,
        })
    }

    pub fn num_exits(&self) -> usize {
        self.topology.num_exits()
    }

    pub(crate) fn layer_param(&self, layer: usize, local: usize) -> usize {
        2 + (layer - 1) * LAYER_PARAM_NAMES.len() + local
    }

    pub(crate) fn head_param(&self, head: usize) -> usize {
        2 + self.config.n_layers * LAYER_PARAM_NAMES.len() + 2 * (head - 1)
    }

    /// Standalone single-exit model made of the embeddings, layers `1..=L_i`
    /// and head `i`, with copied weights.
    pub fn prefix_model(&self, exit: usize) -> Result<Self> {
        self.topology.check_exit(exit)?;
        let depth = self.topology.exit_layer(exit);
        let config = self.config.truncated(depth);
        let mut params: Vec<_> = self
            .params
            .iter()
            .take(self.layer_param(depth + 1, 0))
            .cloned()
            .collect();
        let head = self.head_param(exit);
        for (offset, suffix) in ["weight", "bias"].into_iter().enumerate() {
            let mut p = self.params.get(head + offset).clone();
            p.name = format!("head1.{suffix}");
            params.push(p);
        }
        for p in &mut params {
            p.segment = 1;
        }
        Self::with_params(config, ParameterStore::from_params(params))
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.seq_len > self.config.max_seq_len {
            return Err(Error::validation(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq_len, self.config.max_seq_len
            )));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::validation(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Records the full forward pass (all exits from one shared pass).
    pub fn build_graph(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        gating: Gating,
        trainable: bool,
    ) -> Result<ForwardGraph> {
        self.check_batch(batch)?;
        let mut binder = Binder::new(&self.params, trainable);
        let mask = attention_mask(tape, batch, self.config.n_heads);
        let mut x = self.embed(tape, &mut binder, batch)?;
        let mut hidden = vec![x];
        let mut exit_logits = Vec::with_capacity(self.num_exits());
        let mut next_exit = 1;
        for layer in 1..=self.config.n_layers {
            let input = if gating == Gating::SegmentBoundaries
                && next_exit > 1
                && layer == self.topology.exit_layer(next_exit - 1) + 1
            {
                tape.gradient_gate(x)
            } else {
                x
            };
            x = self.encoder_layer(tape, &mut binder, layer, input, batch.batch, batch.seq_len, mask)?;
            hidden.push(x);
            if layer == self.topology.exit_layer(next_exit) {
                exit_logits.push(self.head(tape, &mut binder, next_exit, x, batch.batch, batch.seq_len)?);
                next_exit += 1;
            }
        }
        let params = (0..self.params.len()).map(|i| binder.var(tape, i)).collect();
        Ok(ForwardGraph {
            params,
            hidden,
            exit_logits,
        })
    }

    /// Logits for every exit and every hidden state, without gradients.
    pub fn forward_all_exits(&self, batch: &Batch) -> Result<ExitOutputs> {
        let mut tape = Tape::new();
        let graph = self.build_graph(&mut tape, batch, Gating::None, false)?;
        Ok(ExitOutputs {
            logits: graph
                .exit_logits
                .iter()
                .map(|&v| tape.value(v).clone())
                .collect(),
            hidden: graph.hidden.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }

    /// Runs a single instance up to and including exit `exit`.
    /// Returns the exit's logits and the number of layers executed.
    pub fn forward_until(&self, ids: &[usize], exit: usize) -> Result<(Vec<f64>, usize)> {
        let mut run = IncrementalForward::new(self, ids)?;
        let step = run.advance_to(exit)?;
        Ok((step.logits, run.layers_executed()))
    }

    pub(crate) fn embed(&self, tape: &mut Tape, binder: &mut Binder<'_>, batch: &Batch) -> Result<Var> {
        let token_table = binder.var(tape, 0);
        let pos_table = binder.var(tape, 1);
        let tok = tape.embedding(token_table, &batch.ids)?;
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq_len).collect();
        let pos = tape.embedding(pos_table, &positions)?;
        tape.add(tok, pos)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn encoder_layer(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        layer: usize,
        x: Var,
        batch: usize,
        seq_len: usize,
        mask: Option<Var>,
    ) -> Result<Var> {
        let p = |local: usize| self.layer_param(layer, local);
        let heads = self.config.n_heads;
        let head_dim = self.config.head_dim();

        let g1 = binder.var(tape, p(P_LN1_GAIN));
        let b1 = binder.var(tape, p(P_LN1_BIAS));
        let h = tape.layernorm(x, g1, b1, LAYERNORM_EPS)?;
        let mut proj = |tape: &mut Tape, w: usize| -> Result<Var> {
            let wv = binder.var(tape, p(w));
            let bv = binder.var(tape, p(w + 1));
            let y = tape.matmul(h, wv)?;
            tape.add(y, bv)
        };
        let q = proj(tape, P_QUERY)?;
        let k = proj(tape, P_KEY)?;
        let v = proj(tape, P_VALUE)?;
        let q = split_heads(tape, q, batch, seq_len, heads, head_dim)?;
        let k = split_heads(tape, k, batch, seq_len, heads, head_dim)?;
        let v = split_heads(tape, v, batch, seq_len, heads, head_dim)?;
        let kt = tape.transpose_last2(k)?;
        let scores = tape.matmul(q, kt)?;
        let mut scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
        if let Some(mask) = mask {
            scores = tape.add(scores, mask)?;
        }
        let attn = tape.softmax(scores, 2)?;
        let ctx = tape.matmul(attn, v)?;
        let ctx = merge_heads(tape, ctx, batch, seq_len, heads, head_dim)?;
        let wo = binder.var(tape, p(P_OUTPUT));
        let bo = binder.var(tape, p(P_OUTPUT + 1));
        let out = tape.matmul(ctx, wo)?;
        let out = tape.add(out, bo)?;
        let x = tape.add(x, out)?;

        let g2 = binder.var(tape, p(P_LN2_GAIN));
        let b2 = binder.var(tape, p(P_LN2_BIAS));
        let h = tape.layernorm(x, g2, b2, LAYERNORM_EPS)?;
        let w_in = binder.var(tape, p(P_FFN_IN));
        let b_in = binder.var(tape, p(P_FFN_IN + 1));
        let w_out = binder.var(tape, p(P_FFN_OUT));
        let b_out = binder.var(tape, p(P_FFN_OUT + 1));
        let f = tape.matmul(h, w_in)?;
        let f = tape.add(f, b_in)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, w_out)?;
        let f = tape.add(f, b_out)?;
        tape.add(x, f)
    }

    /// Linear classifier on the first-token hidden state of each instance.
    pub(crate) fn head(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        exit: usize,
        hidden: Var,
        batch: usize,
        seq_len: usize,
    ) -> Result<Var> {
        let rows: Vec<usize> = (0..batch).map(|b| b * seq_len).collect();
        let first = tape.select_rows(hidden, &rows)?;
        let w = binder.var(tape, self.head_param(exit));
        let b = binder.var(tape, self.head_param(exit) + 1);
        let logits = tape.matmul(first, w)?;
        tape.add(logits, b)
    }
}

/// `-inf` on padded key positions, broadcast to `[batch * heads, T, T]`.
fn attention_mask(tape: &mut Tape, batch: &Batch, heads: usize) -> Option<Var> {
    if !batch.has_padding() {
        return None;
    }
    let t = batch.seq_len;
    let mut data = Vec::with_capacity(batch.batch * heads * t * t);
    for b in 0..batch.batch {
        let keys = &batch.mask[b * t..(b + 1) * t];
        for _ in 0..heads * t {
            data.extend(keys.iter().map(|&real| if real { 0.0 } else { f64::NEG_INFINITY }));
        }
    }
    let mask = Tensor::new(vec![batch.batch * heads, t, t], data).expect("mask shape");
    Some(tape.constant(mask))
}

/// `[B*T, H*dh]` → `[B*H, T, dh]`
fn split_heads(
    tape: &mut Tape,
    x: Var,
    batch: usize,
    seq_len: usize,
    heads: usize,
    head_dim: usize,
) -> Result<Var> {
    let d = heads * head_dim;
    let mut index = Vec::with_capacity(batch * seq_len * d);
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..seq_len {
                let src = (b * seq_len + t) * d + h * head_dim;
                index.extend(src..src + head_dim);
            }
        }
    }
    tape.gather(x, index, vec![batch * heads, seq_len, head_dim])
}

/// `[B*H, T, dh]` → `[B*T, H*dh]`
fn merge_heads(
    tape: &mut Tape,
    x: Var,
    batch: usize,
    seq_len: usize,
    heads: usize,
    head_dim: usize,
) -> Result<Var> {
    let d = heads * head_dim;
    let mut index = Vec::with_capacity(batch * seq_len * d);
    for b in 0..batch {
        for t in 0..seq_len {
            for h in 0..heads {
                let src = ((b * heads + h) * seq_len + t) * head_dim;
                index.extend(src..src + head_dim);
            }
        }
    }
    tape.gather(x, index, vec![batch * seq_len, d])
}

/// One exit's output from an incremental run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitStep {
    pub exit: usize,
    pub logits: Vec<f64>,
    /// First-token hidden state read by the classifier.
    pub pooled: Vec<f64>,
}

/// Early-exit inference state for one instance. Each call to
/// [`IncrementalForward::advance_to`] runs only the layers not yet executed.
#[derive(Debug)]
pub struct IncrementalForward<'m> {
    model: &'m MultiExitModel,
    hidden: Tensor,
    seq_len: usize,
    layers_executed: usize,
}

impl<'m> IncrementalForward<'m> {
    pub fn new(model: &'m MultiExitModel, ids: &[usize]) -> Result<Self> {
        let batch = Batch::from_sequences(&[ids])?;
        model.check_batch(&batch)?;
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.params, false);
        let h0 = model.embed(&mut tape, &mut binder, &batch)?;
        Ok(Self {
            model,
            hidden: tape.value(h0).clone(),
            seq_len: ids.len(),
            layers_executed: 0,
        })
    }

    /// Layers run so far; incremented once per executed layer.
    pub fn layers_executed(&self) -> usize {
        self.layers_executed
    }

    pub fn advance_to(&mut self, exit: usize) -> Result<ExitStep> {
        self.model.topology.check_exit(exit)?;
        let target = self.model.topology.exit_layer(exit);
        if target < self.layers_executed {
            return Err(Error::validation(format!(
                "exit {exit} (layer {target}) is behind the {} layers already run",
                self.layers_executed
            )));
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.model.params, false);
        let mut x = tape.constant(self.hidden.clone());
        for layer in self.layers_executed + 1..=target {
            x = self
                .model
                .encoder_layer(&mut tape, &mut binder, layer, x, 1, self.seq_len, None)?;
            self.layers_executed += 1;
        }
        let logits = self.model.head(&mut tape, &mut binder, exit, x, 1, self.seq_len)?;
        self.hidden = tape.value(x).clone();
        Ok(ExitStep {
            exit,
            logits: tape.value(logits).data().to_vec(),
            pooled: self.hidden.row(0).to_vec(),
        })
    }
}
