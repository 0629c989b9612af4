//! On-disk layout and versioned envelopes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::SCHEMA_VERSION;
use crate::error::{CliError, CliResult};

/// Wraps every JSON artifact with its schema version and the producing
/// config's hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope<T> {
    pub schema_version: u32,
    pub kind: String,
    pub config_hash: String,
    pub payload: T,
}

impl<T> Envelope<T> {
    pub fn new(kind: &str, config_hash: &str, payload: T) -> Self {
        Self { schema_version: SCHEMA_VERSION, kind: kind.into(), config_hash: config_hash.into(), payload }
    }
}

/// Paths below the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn demos(&self, task: &str) -> PathBuf {
        self.root.join("demos").join(format!("{task}.json"))
    }

    pub fn model(&self, name: &str) -> PathBuf {
        self.root.join("models").join(format!("{name}.json"))
    }

    pub fn train_manifest(&self) -> PathBuf {
        self.root.join("models").join("manifest.json")
    }

    pub fn loss_csv(&self, name: &str) -> PathBuf {
        self.root.join("models").join(format!("loss_{name}.csv"))
    }

    pub fn thresholds(&self) -> PathBuf {
        self.root.join("calibration").join("thresholds.json")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("eval").join("report.json")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("eval").join("summary.txt")
    }

    pub fn trajectories(&self) -> PathBuf {
        self.root.join("eval").join("trajectories.jsonl")
    }

    pub fn histogram_csv(&self) -> PathBuf {
        self.root.join("plots").join("step_histogram.csv")
    }

    pub fn ablation_csv(&self) -> PathBuf {
        self.root.join("plots").join("ablation_bars.csv")
    }
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    ensure_parent(path)?;
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path, hint: &str) -> CliResult<T> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CliError::MissingInput { path: path.to_path_buf(), hint: hint.into() })
        }
        Err(e) => return Err(CliError::io(path, e)),
    };
    serde_json::from_str(&text).map_err(|e| CliError::Schema { path: path.to_path_buf(), message: e.to_string() })
}

/// Reads an envelope and checks its schema version and kind.
pub fn read_envelope<T: DeserializeOwned>(path: &Path, kind: &str, hint: &str) -> CliResult<Envelope<T>> {
    let env: Envelope<T> = read_json(path, hint)?;
    if env.schema_version != SCHEMA_VERSION || env.kind != kind {
        return Err(CliError::Schema {
            path: path.to_path_buf(),
            message: format!(
                "expected {kind} v{SCHEMA_VERSION}, found {} v{}",
                env.kind, env.schema_version
            ),
        });
    }
    Ok(env)
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::io(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::io(path, e))?;
    write_bytes(path, &bytes)
}
