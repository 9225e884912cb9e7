use serde::{Deserialize, Serialize};

use super::{argmax, ExitTable};
use crate::error::{Error, Result};

/// Logits are clipped here so scores stay strictly inside (0, 1).
const MAX_LOGIT: f64 = 30.0;

/// Logistic gate on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl Gate {
    pub fn validate(&self) -> Result<()> {
        let d = self.weight.len();
        if self.mean.len() != d || self.scale.len() != d {
            return Err(Error::validation("gate vectors differ in length"));
        }
        if self.scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::validation("gate scales must be positive"));
        }
        Ok(())
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        let z: f64 = x
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .zip(&self.weight)
            .map(|(((x, m), s), w)| w * (x - m) / s)
            .sum::<f64>()
            + self.bias;
        z.clamp(-MAX_LOGIT, MAX_LOGIT)
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            learning_rate: 0.5,
            l2: 1e-4,
        }
    }
}

/// Full-batch gradient descent on binary cross-entropy plus an L2 penalty,
/// starting from zero.
pub fn fit_gate(features: &[Vec<f64>], targets: &[bool], config: &GateConfig) -> Result<Gate> {
    let n = features.len();
    if n == 0 || n != targets.len() {
        return Err(Error::validation("gate training needs matching nonempty features and targets"));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::validation("gate features differ in length"));
    }
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x / n as f64;
        }
    }
    let mut scale = vec![0.0; d];
    for f in features {
        for ((s, x), m) in scale.iter_mut().zip(f).zip(&mean) {
            *s += (x - m) * (x - m) / n as f64;
        }
    }
    for s in &mut scale {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    let z: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().zip(&mean).zip(&scale).map(|((x, m), s)| (x - m) / s).collect())
        .collect();

    let mut weight = vec![0.0; d];
    let mut bias = 0.0;
    for _ in 0..config.iterations {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, &t) in z.iter().zip(targets) {
            let logit: f64 = x.iter().zip(&weight).map(|(a, b)| a * b).sum::<f64>() + bias;
            let err = sigmoid(logit) - if t { 1.0 } else { 0.0 };
            gb += err;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += err * xi;
            }
        }
        for (w, g) in weight.iter_mut().zip(&gw) {
            *w -= config.learning_rate * (g / n as f64 + config.l2 * *w);
        }
        bias -= config.learning_rate * gb / n as f64;
    }
    Ok(Gate {
        mean,
        scale,
        weight,
        bias,
    })
}

/// Pooled states and "prediction correct" targets for classifier `exit`.
pub fn gate_training_set(table: &ExitTable, exit: usize) -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
    let labels = table.labels()?;
    let features = table.rows.iter().map(|r| r.pooled[exit - 1].clone()).collect();
    let targets = table
        .rows
        .iter()
        .zip(&labels)
        .map(|(r, &y)| argmax(&r.logits[exit - 1]) == y)
        .collect();
    Ok((features, targets))
}

/// One gate per classifier. The table holds outputs of a frozen model, so
/// the backbone cannot change.
pub fn train_lte_gates(table: &ExitTable, config: &GateConfig) -> Result<Vec<Gate>> {
    (1..=table.num_exits())
        .map(|exit| {
            let (features, targets) = gate_training_set(table, exit)?;
            let correct = targets.iter().filter(|&&t| t).count();
            if correct == 0 || correct == targets.len() {
                log::warn!(
                    "classifier {exit} is {} on every gate training instance; its gate learns a constant",
                    if correct == 0 { "wrong" } else { "right" }
                );
            }
            fit_gate(&features, &targets, config)
        })
        .collect()
}
