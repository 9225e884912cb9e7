use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which classifier owns which part of the network.
///
/// Exits and segments are 1-based. Segment `i` is the layer range
/// `(L_{i-1}, L_i]` with `L_0 = 0`, plus head `i`; the embeddings belong to
/// segment 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitTopology {
    exit_layers: Vec<usize>,
}

impl ExitTopology {
    pub fn new(exit_layers: Vec<usize>) -> Result<Self> {
        if exit_layers.is_empty()
            || exit_layers[0] == 0
            || exit_layers.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(vec![format!(
                "exit layers {exit_layers:?} must be non-empty, 1-based and strictly increasing"
            )]));
        }
        Ok(Self { exit_layers })
    }

    pub fn exit_layers(&self) -> &[usize] {
        &self.exit_layers
    }

    pub fn num_exits(&self) -> usize {
        self.exit_layers.len()
    }

    /// Total depth `L_M`.
    pub fn depth(&self) -> usize {
        *self.exit_layers.last().expect("non-empty")
    }

    /// `L_i` for a 1-based exit index.
    pub fn exit_layer(&self, exit: usize) -> usize {
        self.exit_layers[exit - 1]
    }

    pub fn check_exit(&self, exit: usize) -> Result<()> {
        if exit == 0 || exit > self.num_exits() {
            return Err(Error::validation(format!(
                "exit index {exit} out of range 1..={}",
                self.num_exits()
            )));
        }
        Ok(())
    }

    /// Segment owning the 1-based `layer`.
    pub fn segment_of_layer(&self, layer: usize) -> usize {
        assert!(
            layer >= 1 && layer <= self.depth(),
            "layer {layer} out of range"
        );
        self.exit_layers.partition_point(|&l| l < layer) + 1
    }

    pub fn segment_of_head(&self, head: usize) -> usize {
        head
    }

    pub fn segment_of_embedding(&self) -> usize {
        1
    }

    /// Layers run by a cascade of independent models that stops at `exit`:
    /// `Σ_{j≤i} L_j`.
    pub fn cascade_cost(&self, exit: usize) -> usize {
        self.exit_layers[..exit].iter().sum()
    }

    /// Exits whose loss reaches `layer` without truncation, i.e. `L_i ≥ layer`.
    pub fn exits_reaching(&self, layer: usize) -> Vec<usize> {
        (1..=self.num_exits())
            .filter(|&i| self.exit_layer(i) >= layer)
            .collect()
    }
}
