use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a multi-exit encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
    /// 1-based layer indices after which a classifier reads the hidden state.
    pub exit_layers: Vec<usize>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            vocab_size: 512,
            max_seq_len: 32,
            n_classes: 2,
            exit_layers: vec![1, 2, 4],
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Collects every violated constraint rather than stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.n_classes < 2 {
            problems.push(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.n_heads > 0 && !self.d_model.is_multiple_of(self.n_heads) {
            problems.push(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.exit_layers.is_empty() {
            problems.push("exit_layers must not be empty".into());
        } else {
            if self.exit_layers[0] == 0 {
                problems.push("exit layers are 1-based".into());
            }
            if self.exit_layers.windows(2).any(|w| w[0] >= w[1]) {
                problems.push(format!(
                    "exit_layers {:?} must be strictly increasing",
                    self.exit_layers
                ));
            }
            if self.exit_layers.last() != Some(&self.n_layers) {
                problems.push(format!(
                    "last exit layer {:?} must equal n_layers {}",
                    self.exit_layers.last(),
                    self.n_layers
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Config of the standalone single-exit model that ends at `depth`.
    pub fn truncated(&self, depth: usize) -> Self {
        Self {
            n_layers: depth,
            exit_layers: vec![depth],
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn lists_every_violation() {
        let cfg = ModelConfig {
            d_model: 30,
            n_heads: 4,
            exit_layers: vec![2, 1],
            ..ModelConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 3, "{p:?}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
