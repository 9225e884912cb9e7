//! On-disk layout of a trained model directory.
//!
//! * `run.json`: regime, topology, checkpoint names, labels and data paths
//! * `vocab.json`: fitted tokenizer
//! * `model.mxex` or `model_exit{i}.mxex`: checkpoints
//! * `train_log.jsonl`: one line per optimizer step

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sweetexit::data::{load_dataset, DataFormat, Dataset, LabelSet, Tokenizer};
use sweetexit::model::{checkpoint, MultiExitModel};
use sweetexit::train::{Regime, TrainOutput};
use sweetexit::{Error, Result};

use crate::files;

pub const RUN_FILE: &str = "run.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunInfo {
    pub regime: Regime,
    pub exit_layers: Vec<usize>,
    pub checkpoints: Vec<String>,
    pub labels: Vec<String>,
    pub format: DataFormat,
    pub train_data: PathBuf,
    pub validation_data: Option<PathBuf>,
    pub steps: usize,
}

pub fn checkpoint_names(regime: Regime, num_exits: usize) -> Vec<String> {
    match regime {
        Regime::MultiModel => (1..=num_exits).map(|i| format!("model_exit{i}.mxex")).collect(),
        _ => vec!["model.mxex".to_string()],
    }
}

pub struct ModelDir {
    pub path: PathBuf,
    pub info: RunInfo,
    pub tokenizer: Tokenizer,
    pub models: Vec<MultiExitModel>,
}

impl ModelDir {
    pub fn load(path: &Path) -> Result<Self> {
        let info: RunInfo = files::read_config(&path.join(RUN_FILE))?;
        let tokenizer = Tokenizer::from_json(&files::read_to_string(&path.join(VOCAB_FILE))?)?;
        let models = info
            .checkpoints
            .iter()
            .map(|c| checkpoint::load(&path.join(c)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { path: path.to_path_buf(), info, tokenizer, models })
    }

    /// Files a run reading this directory depends on.
    pub fn files(path: &Path) -> Result<Vec<PathBuf>> {
        let info: RunInfo = files::read_config(&path.join(RUN_FILE))?;
        let mut out = vec![path.join(RUN_FILE), path.join(VOCAB_FILE)];
        out.extend(info.checkpoints.iter().map(|c| path.join(c)));
        Ok(out)
    }

    pub fn labels(&self) -> LabelSet {
        LabelSet { names: self.info.labels.clone() }
    }

    pub fn load_data(&self, data: &Path, split: &str) -> Result<Dataset> {
        let format = DataFormat::from_path(data).unwrap_or(self.info.format);
        load_dataset(data, format, &self.tokenizer, &self.labels(), split)
    }

    pub fn output(&self) -> TrainOutput {
        TrainOutput { regime: self.info.regime, models: self.models.clone(), log: Vec::new() }
    }

    pub fn shared_backbone(&self) -> Result<&MultiExitModel> {
        match self.models.as_slice() {
            [m] => Ok(m),
            _ => Err(Error::validation(format!(
                "{} holds {} independent models; this needs one shared backbone",
                self.path.display(),
                self.models.len()
            ))),
        }
    }
}
