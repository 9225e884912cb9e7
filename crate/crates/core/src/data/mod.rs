//! Datasets: synthetic generation, text loading and seeded subsampling.

mod synthetic;
mod text;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::{stream_rng, streams};

pub use synthetic::{generate_synthetic, render_text, CueStrength, SyntheticTaskSpec};
pub use text::{load_dataset, load_splits, read_records, DataFormat, LabelSet, Tokenizer, CLS_ID, UNK_ID};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: usize,
    /// Token ids, starting with the classification token.
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub split: String,
    pub n_classes: usize,
    pub vocab_size: usize,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn new(
        split: impl Into<String>,
        n_classes: usize,
        vocab_size: usize,
        instances: Vec<Instance>,
    ) -> Result<Self> {
        let ds = Self {
            split: split.into(),
            n_classes,
            vocab_size,
            instances,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for inst in &self.instances {
            if inst.label >= self.n_classes {
                return Err(Error::validation(format!(
                    "instance {} has label {} outside 0..{}",
                    inst.id, inst.label, self.n_classes
                )));
            }
            if let Some(&t) = inst.tokens.iter().find(|&&t| t >= self.vocab_size) {
                return Err(Error::validation(format!(
                    "instance {} has token id {t} outside vocabulary of {}",
                    inst.id, self.vocab_size
                )));
            }
            if inst.tokens.is_empty() {
                return Err(Error::validation(format!("instance {} is empty", inst.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.label).collect()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.id).collect()
    }

    /// Batch of the instances at `indices`, plus their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Batch, Vec<usize>)> {
        let seqs: Vec<&[usize]> = indices
            .iter()
            .map(|&i| self.instances[i].tokens.as_slice())
            .collect();
        let labels = indices.iter().map(|&i| self.instances[i].label).collect();
        Ok((Batch::from_sequences(&seqs)?, labels))
    }

    /// Consecutive batches of at most `size` instances, in dataset order.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Vec<usize>> + '_ {
        let n = self.len();
        (0..n.div_ceil(size)).map(move |c| (c * size..((c + 1) * size).min(n)).collect())
    }
}

/// Seeded uniform sample of `n` instances without replacement. Returns the
/// whole dataset when `n` is at least its size. Sampled instances keep their
/// original relative order, so a seed picks the same subset for every
/// consumer.
pub fn subsample(dataset: &Dataset, n: usize, seed: u64) -> Dataset {
    if n >= dataset.len() {
        return dataset.clone();
    }
    let mut rng = stream_rng(seed, streams::SUBSAMPLE);
    let mut picked = index::sample(&mut rng, dataset.len(), n).into_vec();
    picked.sort_unstable();
    Dataset {
        instances: picked.into_iter().map(|i| dataset.instances[i].clone()).collect(),
        ..dataset.clone()
    }
}
