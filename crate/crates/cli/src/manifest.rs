//! Run manifests: a JSON sidecar describing exactly how a command ran, so it
//! can be replayed and its outputs compared.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stochsyn_core::data::sha256_hex;

use crate::error::{CliError, CliResult};
use crate::jobs::Job;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(CliError::io(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    #[serde(flatten)]
    pub job: Job,
    pub seeds: Vec<u64>,
    pub version: String,
    pub argv: Vec<String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Start time in seconds since the Unix epoch.
    pub started_unix: u64,
    pub wall_clock_s: f64,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> CliResult<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(CliError::io(path))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{} is not a run manifest: {e}", path.display())))
    }
}

/// Output files whose contents differ between two manifests, matched by
/// file name.
pub fn diverging_outputs(recorded: &RunManifest, replayed: &RunManifest) -> Vec<String> {
    let name = |d: &FileDigest| d.path.file_name().map(|n| n.to_string_lossy().into_owned());
    let mut bad = Vec::new();
    for old in &recorded.outputs {
        let found = replayed.outputs.iter().find(|new| name(new) == name(old));
        match found {
            Some(new) if new.sha256 == old.sha256 => {}
            Some(_) => bad.push(format!("{} differs", old.path.display())),
            None => bad.push(format!("{} was not produced", old.path.display())),
        }
    }
    bad
}
