//! Where every artifact lives under the output root, plus the small JSONL
//! logs (freeze hashes, timings) that sit next to the report.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::CliError;

pub const FREEZE_LOG: &str = "freeze.jsonl";
pub const TIMINGS_LOG: &str = "timings.jsonl";

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn lm(&self) -> PathBuf {
        self.models().join("lm.ucrn")
    }

    pub fn encoder(&self) -> PathBuf {
        self.models().join("encoder.ucrn")
    }

    pub fn stage1(&self) -> PathBuf {
        self.models().join("retriever-stage1.ucrn")
    }

    pub fn retriever(&self) -> PathBuf {
        self.models().join("retriever.ucrn")
    }

    pub fn ablation(&self) -> PathBuf {
        self.models().join("retriever-ablation.ucrn")
    }

    pub fn xi(&self) -> PathBuf {
        self.models().join("entity-adapter.ucrn")
    }

    pub fn index(&self) -> PathBuf {
        self.root.join("index.ucrn")
    }

    pub fn transcripts(&self) -> PathBuf {
        self.root.join("transcripts")
    }

    pub fn freeze_log(&self) -> PathBuf {
        self.root.join(FREEZE_LOG)
    }

    pub fn timings_log(&self) -> PathBuf {
        self.root.join(TIMINGS_LOG)
    }

    pub fn failed_marker(&self, command: &str) -> PathBuf {
        self.root.join(format!("{command}.failed"))
    }
}

/// Hash of a frozen model before and after a training command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeRecord {
    pub command: String,
    pub model: String,
    pub before: String,
    pub after: String,
    pub identical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub command: String,
    pub seconds: f64,
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::Runtime(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// Rewrites `path` with `new` replacing any rows that share its key.
pub fn upsert_jsonl<T, K>(path: &Path, new: Vec<T>, key: impl Fn(&T) -> K) -> Result<(), CliError>
where
    T: Serialize + DeserializeOwned,
    K: PartialEq,
{
    let mut rows: Vec<T> = read_jsonl(path)?;
    rows.retain(|r| !new.iter().any(|n| key(n) == key(r)));
    rows.extend(new);
    let mut out = String::new();
    for r in &rows {
        out.push_str(&serde_json::to_string(r).map_err(|e| CliError::Runtime(e.to_string()))?);
        out.push('\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)?;
    Ok(())
}
