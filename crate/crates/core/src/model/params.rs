use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::ModelConfig;
use super::topology::ExitTopology;
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};

const INIT_STD: f64 = 0.02;
/// Samples beyond this many standard deviations are redrawn.
const INIT_TRUNCATION: f64 = 2.0;

/// Parameters per encoder layer, in storage order.
pub(crate) const LAYER_PARAM_NAMES: [&str; 16] = [
    "ln1.gain",
    "ln1.bias",
    "attn.query",
    "attn.query_bias",
    "attn.key",
    "attn.key_bias",
    "attn.value",
    "attn.value_bias",
    "attn.output",
    "attn.output_bias",
    "ln2.gain",
    "ln2.bias",
    "ffn.w_in",
    "ffn.b_in",
    "ffn.w_out",
    "ffn.b_out",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitKind {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub segment: usize,
    pub tensor: Tensor,
}

/// Named parameter tensors in a fixed order: embeddings, layers 1..N, heads
/// 1..M.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    params: Vec<Parameter>,
}

impl ParameterStore {
    /// Layout with every value zero.
    pub(crate) fn skeleton(config: &ModelConfig, topology: &ExitTopology) -> Self {
        let params = layout(config, topology)
            .into_iter()
            .map(|(name, segment, shape, _)| Parameter {
                name,
                segment,
                tensor: Tensor::zeros(&shape),
            })
            .collect();
        Self { params }
    }

    /// Truncated-normal weights, zero biases and unit layernorm gains, drawn
    /// in storage order from the stream of `init_seed ⊕ n_layers`.
    pub(crate) fn initialize(config: &ModelConfig, topology: &ExitTopology) -> Self {
        let mut rng = stream_rng(config.init_seed ^ config.n_layers as u64, streams::INIT);
        let params = layout(config, topology)
            .into_iter()
            .map(|(name, segment, shape, kind)| {
                let numel: usize = shape.iter().product();
                let data = match kind {
                    InitKind::Zeros => vec![0.0; numel],
                    InitKind::Ones => vec![1.0; numel],
                    InitKind::Normal => (0..numel).map(|_| truncated_normal(&mut rng)).collect(),
                };
                Parameter {
                    name,
                    segment,
                    tensor: Tensor::new(shape, data).expect("layout shapes are consistent"),
                }
            })
            .collect();
        Self { params }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter> {
        self.params.iter_mut()
    }

    pub fn get(&self, index: usize) -> &Parameter {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Parameter {
        &mut self.params[index]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Every value, in storage order.
    pub fn flat_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.params.iter().flat_map(|p| p.tensor.data().iter().copied())
    }

    pub(crate) fn fill_from(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter values, found {}",
                self.numel(),
                values.len()
            )));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.tensor.numel();
            p.tensor.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Bitwise equality of names, segments and values.
    pub fn bit_eq(&self, other: &ParameterStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name && a.segment == b.segment && a.tensor.bit_eq(&b.tensor)
            })
    }

    pub(crate) fn from_params(params: Vec<Parameter>) -> Self {
        Self { params }
    }
}

fn truncated_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= INIT_TRUNCATION {
            return z * INIT_STD;
        }
    }
}

pub(crate) fn layer_param_name(layer: usize, local: &str) -> String {
    format!("layer{layer}.{local}")
}

pub(crate) fn head_param_names(head: usize) -> [String; 2] {
    [format!("head{head}.weight"), format!("head{head}.bias")]
}

fn layout(
    config: &ModelConfig,
    topology: &ExitTopology,
) -> Vec<(String, usize, Vec<usize>, InitKind)> {
    let d = config.d_model;
    let ff = config.d_ff;
    let mut out = vec![
        (
            "embed.token".to_string(),
            topology.segment_of_embedding(),
            vec![config.vocab_size, d],
            InitKind::Normal,
        ),
        (
            "embed.position".to_string(),
            topology.segment_of_embedding(),
            vec![config.max_seq_len, d],
            InitKind::Normal,
        ),
    ];
    for layer in 1..=config.n_layers {
        let segment = topology.segment_of_layer(layer);
        for local in LAYER_PARAM_NAMES {
            let (shape, kind) = match local {
                "ln1.gain" | "ln2.gain" => (vec![d], InitKind::Ones),
                "ln1.bias" | "ln2.bias" | "attn.query_bias" | "attn.key_bias"
                | "attn.value_bias" | "attn.output_bias" | "ffn.b_out" => {
                    (vec![d], InitKind::Zeros)
                }
                "ffn.b_in" => (vec![ff], InitKind::Zeros),
                "ffn.w_in" => (vec![d, ff], InitKind::Normal),
                "ffn.w_out" => (vec![ff, d], InitKind::Normal),
                _ => (vec![d, d], InitKind::Normal),
            };
            out.push((layer_param_name(layer, local), segment, shape, kind));
        }
    }
    for head in 1..=topology.num_exits() {
        let [w, b] = head_param_names(head);
        let segment = topology.segment_of_head(head);
        out.push((w, segment, vec![d, config.n_classes], InitKind::Normal));
        out.push((b, segment, vec![config.n_classes], InitKind::Zeros));
    }
    out
}
