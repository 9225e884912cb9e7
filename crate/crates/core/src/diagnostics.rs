//! Gradient conflict between exit classifiers.
//!
//! For each layer that feeds a non-final classifier, every loss that reaches
//! the layer is back-propagated on its own through one shared, ungated
//! forward pass. Pairs of gradients of the probed matrix are compared by the
//! mean cosine similarity of their rows.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{Batch, Gating, MultiExitModel};
use crate::train::exit_losses;

/// Second feed-forward matrix of a block.
pub const DEFAULT_PROBE: &str = "ffn.w_out";

/// Per-loss gradients of one probed matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerProbe {
    pub layer: usize,
    pub matrix: String,
    /// Classifiers whose loss reaches the layer, ascending.
    pub exits: Vec<usize>,
    /// `∂CE_i/∂W` for each entry of `exits`, one row per output unit.
    pub grads: Vec<Tensor>,
}

/// Probes layers `L_1..L_{M-1}`; the final layer has a single classifier.
pub fn probe_gradients(
    model: &MultiExitModel,
    batch: &Batch,
    labels: &[usize],
    matrix: &str,
) -> Result<Vec<LayerProbe>> {
    let topology = &model.topology;
    let probed: Vec<usize> = topology.exit_layers()[..topology.num_exits() - 1].to_vec();
    let indices = probed
        .iter()
        .map(|&layer| {
            let name = format!("layer{layer}.{matrix}");
            let i = model
                .params
                .position(&name)
                .ok_or_else(|| Error::validation(format!("no parameter named {name}")))?;
            if model.params.get(i).tensor.shape().len() != 2 {
                return Err(Error::validation(format!("{name} is not a matrix")));
            }
            Ok(i)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut tape = Tape::new();
    let graph = model.build_graph(&mut tape, batch, Gating::None, true)?;
    let losses = exit_losses(&mut tape, &graph.exit_logits, labels)?;
    let per_loss = losses
        .iter()
        .map(|&l| tape.backward(l))
        .collect::<Result<Vec<_>>>()?;

    Ok(probed
        .iter()
        .zip(&indices)
        .map(|(&layer, &p)| {
            let exits = topology.exits_reaching(layer);
            let grads = exits
                .iter()
                .map(|&e| {
                    let g = per_loss[e - 1]
                        .get(graph.params[p])
                        .expect("a reaching loss has a gradient");
                    transpose(g)
                })
                .collect();
            LayerProbe {
                layer,
                matrix: matrix.to_string(),
                exits,
                grads,
            }
        })
        .collect())
}

/// Weights are stored `[in, out]`; report them `[out, in]`.
fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], data).expect("transpose shape")
}

/// Mean over rows of the cosine between matching rows, skipping rows where
/// either side has zero norm. Returns the similarity and the skipped count.
pub fn row_cosine_similarity_counted(a: &Tensor, b: &Tensor) -> Result<(f64, usize)> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::Shape {
            op: "row_cosine_similarity",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut total = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for r in 0..a.rows() {
        let (x, y) = (a.row(r), b.row(r));
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nx == 0.0 || ny == 0.0 {
            skipped += 1;
            continue;
        }
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        total += (dot / (nx * ny)).clamp(-1.0, 1.0);
        used += 1;
    }
    if used == 0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((total / used as f64, skipped))
}

pub fn row_cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    row_cosine_similarity_counted(a, b).map(|(s, _)| s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarity {
    pub i: usize,
    pub j: usize,
    pub sim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub layer: usize,
    pub matrix: String,
    pub pairs: Vec<PairSimilarity>,
    /// Zero-norm rows skipped, summed over pairs.
    pub skipped_rows: usize,
}

impl ConflictReport {
    pub fn from_probe(probe: &LayerProbe) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut skipped_rows = 0;
        for a in 0..probe.exits.len() {
            for b in a + 1..probe.exits.len() {
                let (sim, skipped) = row_cosine_similarity_counted(&probe.grads[a], &probe.grads[b])?;
                skipped_rows += skipped;
                pairs.push(PairSimilarity {
                    i: probe.exits[a],
                    j: probe.exits[b],
                    sim,
                });
            }
        }
        Ok(Self {
            layer: probe.layer,
            matrix: probe.matrix.clone(),
            pairs,
            skipped_rows,
        })
    }

    /// `sim[i][j]` for classifiers `i, j`, 1.0 on the diagonal.
    pub fn similarity(&self, i: usize, j: usize) -> Option<f64> {
        if i == j {
            return self.pairs.iter().any(|p| p.i == i || p.j == i).then_some(1.0);
        }
        let (i, j) = (i.min(j), i.max(j));
        self.pairs.iter().find(|p| p.i == i && p.j == j).map(|p| p.sim)
    }
}

/// Probes and reports every non-final exit layer.
pub fn conflict_reports(
    model: &MultiExitModel,
    batch: &Batch,
    labels: &[usize],
    matrix: &str,
) -> Result<Vec<ConflictReport>> {
    probe_gradients(model, batch, labels, matrix)?
        .iter()
        .map(ConflictReport::from_probe)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposes() {
        let t = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(transpose(&t).data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn zero_rows_are_skipped_and_counted() {
        let a = Tensor::new(vec![2, 2], vec![1., 0., 0., 0.]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![2., 0., 1., 1.]).unwrap();
        assert_eq!(row_cosine_similarity_counted(&a, &b).unwrap(), (1.0, 1));
        let z = Tensor::zeros(&[2, 2]);
        assert!(matches!(row_cosine_similarity(&z, &b), Err(Error::UndefinedSimilarity)));
    }
}
