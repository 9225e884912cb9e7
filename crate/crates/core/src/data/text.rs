use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Instance};
use crate::error::{Error, Result};

pub const UNK_ID: usize = 0;
pub const CLS_ID: usize = 1;
const UNK: &str = "[UNK]";
const CLS: &str = "[CLS]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    /// `text<TAB>label` per line.
    Tsv,
    /// `{"text": ..., "label": ...}` per line.
    Jsonl,
}

impl DataFormat {
    /// Guesses from the file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "tsv" => Some(Self::Tsv),
            "jsonl" | "json" => Some(Self::Jsonl),
            _ => None,
        }
    }
}

/// Whitespace tokenizer with a vocabulary fitted on a training split.
///
/// Id 0 is the unknown token and id 1 the classification token that starts
/// every encoded sequence; fitted words follow in order of first appearance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    tokens: Vec<String>,
    max_seq_len: usize,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Tokenizer {
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>, max_seq_len: usize) -> Self {
        let mut tokens = vec![UNK.to_string(), CLS.to_string()];
        let mut index: HashMap<String, usize> =
            tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        for text in texts {
            for word in text.split_whitespace() {
                if !index.contains_key(word) {
                    index.insert(word.to_string(), tokens.len());
                    tokens.push(word.to_string());
                }
            }
        }
        Self {
            tokens,
            max_seq_len,
            index,
        }
    }

    fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, t)| (t, i))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        std::iter::once(CLS_ID)
            .chain(
                text.split_whitespace()
                    .map(|w| self.index.get(w).copied().unwrap_or(UNK_ID)),
            )
            .take(self.max_seq_len.max(1))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != CLS_ID)
            .map(|&i| self.tokens.get(i).map_or(UNK, String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut t: Self = serde_json::from_str(s)?;
        t.reindex();
        Ok(t)
    }
}

/// Label strings of a task, in a fixed order. Integer-like labels sort
/// numerically, anything else lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub names: Vec<String>,
}

impl LabelSet {
    pub fn fit<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let mut names: Vec<String> = labels.into_iter().map(str::to_string).collect();
        names.sort();
        names.dedup();
        if names.iter().all(|n| n.parse::<i64>().is_ok()) {
            names.sort_by_key(|n| n.parse::<i64>().expect("checked"));
        }
        Self { names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Deserialize)]
struct JsonRecord {
    text: String,
    label: serde_json::Value,
}

/// Raw `(line number, text, label)` records of a file.
pub fn read_records(path: &Path, format: DataFormat) -> Result<Vec<(usize, String, String)>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let data_err = |line: usize, message: String| Error::Data {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (text, label) = match format {
            DataFormat::Tsv => {
                let (text, label) = line
                    .rsplit_once('\t')
                    .ok_or_else(|| data_err(line_no, "expected `text<TAB>label`".into()))?;
                (text.to_string(), label.trim().to_string())
            }
            DataFormat::Jsonl => {
                let rec: JsonRecord = serde_json::from_str(line)
                    .map_err(|e| data_err(line_no, format!("malformed JSON record: {e}")))?;
                let label = match rec.label {
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Number(n) => n.to_string(),
                    other => {
                        return Err(data_err(line_no, format!("label must be a string or number, got {other}")))
                    }
                };
                (rec.text, label)
            }
        };
        if label.is_empty() {
            return Err(data_err(line_no, "empty label".into()));
        }
        out.push((line_no, text, label));
    }
    Ok(out)
}

/// Reads and encodes a file. Instance ids follow record order from 0.
pub fn load_dataset(
    path: &Path,
    format: DataFormat,
    tokenizer: &Tokenizer,
    labels: &LabelSet,
    split: &str,
) -> Result<Dataset> {
    let records = read_records(path, format)?;
    let mut instances = Vec::with_capacity(records.len());
    for (id, (line, text, label)) in records.into_iter().enumerate() {
        let label = labels.index(&label).ok_or_else(|| Error::Data {
            path: path.to_path_buf(),
            line,
            message: format!("unseen label {label:?}"),
        })?;
        instances.push(Instance {
            id,
            tokens: tokenizer.encode(&text),
            label,
        });
    }
    Dataset::new(split, labels.len(), tokenizer.vocab_size(), instances)
}

/// Fits the tokenizer and label set on `train` and loads every split with
/// them.
pub fn load_splits(
    train: &Path,
    others: &[(&str, &Path)],
    format: DataFormat,
    max_seq_len: usize,
) -> Result<(Tokenizer, LabelSet, Dataset, Vec<Dataset>)> {
    let records = read_records(train, format)?;
    let tokenizer = Tokenizer::fit(records.iter().map(|(_, t, _)| t.as_str()), max_seq_len);
    let labels = LabelSet::fit(records.iter().map(|(_, _, l)| l.as_str()));
    if labels.len() < 2 {
        return Err(Error::validation(format!(
            "{} has fewer than two distinct labels",
            train.display()
        )));
    }
    let train_ds = load_dataset(train, format, &tokenizer, &labels, "train")?;
    let rest = others
        .iter()
        .map(|(split, path)| load_dataset(path, format, &tokenizer, &labels, split))
        .collect::<Result<_>>()?;
    Ok((tokenizer, labels, train_ds, rest))
}
