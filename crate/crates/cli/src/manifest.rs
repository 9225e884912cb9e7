use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sweetexit::{Error, Result};

use crate::files;
use crate::invocation::Invocation;

pub const VERSION: &str = env!("SWEETEXIT_VERSION");

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to redo a run. The timestamp lives only here, so
/// every other output of a rerun is byte-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub created_at: String,
    pub argv: Vec<String>,
    pub seeds: Vec<u64>,
    pub inputs: Vec<InputFile>,
    pub invocation: Invocation,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

impl Manifest {
    pub fn new(argv: Vec<String>, invocation: Invocation, seeds: Vec<u64>, inputs: &[PathBuf]) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| Ok(InputFile { path: p.clone(), sha256: sha256_file(p)? }))
            .collect::<Result<_>>()?;
        Ok(Self {
            version: VERSION.to_string(),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            argv,
            seeds,
            inputs,
            invocation,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        files::read_config(path)
    }

    /// Fails if any recorded input changed since the run.
    pub fn check_inputs(&self) -> Result<()> {
        for input in &self.inputs {
            let now = sha256_file(&input.path)?;
            if now != input.sha256 {
                return Err(Error::validation(format!(
                    "input {} changed since the manifest was written",
                    input.path.display()
                )));
            }
        }
        Ok(())
    }
}
