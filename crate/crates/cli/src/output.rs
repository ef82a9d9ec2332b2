//! Artifact writing. Every artifact carries the same metadata triple so a
//! result can be traced back to the run that produced it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::error::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Meta {
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
}

impl Meta {
    pub fn new(seed: u64, config_hash: String) -> Self {
        Self {
            seed,
            config_hash,
            version: VERSION.to_string(),
        }
    }

    /// Trailing comment line for CSV files and checkpoints.
    pub fn comment(&self) -> String {
        format!(
            "# seed={} config_hash={} version={}\n",
            self.seed, self.config_hash, self.version
        )
    }

    pub fn json(&self) -> Value {
        serde_json::to_value(self).expect("meta serializes")
    }
}

/// Shortest decimal that parses back to the same `f64`.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Accumulates CSV rows; the metadata comment goes after the data so the
/// header stays on the first line.
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self {
            text: format!("{}\n", header.join(",")),
        }
    }

    pub fn row(&mut self, fields: &[String]) {
        writeln!(self.text, "{}", fields.join(",")).unwrap();
    }

    pub fn finish(mut self, meta: &Meta) -> String {
        self.text.push_str(&meta.comment());
        self.text
    }
}

/// JSON-lines document whose first record is the metadata.
#[derive(Clone)]
pub struct JsonLines {
    text: String,
}

impl JsonLines {
    pub fn new(meta: &Meta) -> Self {
        let mut out = Self {
            text: String::new(),
        };
        out.push(&serde_json::json!({ "record": "meta", "meta": meta.json() }));
        out
    }

    pub fn push(&mut self, v: &Value) {
        self.text
            .push_str(&serde_json::to_string(v).expect("record serializes"));
        self.text.push('\n');
    }

    pub fn into_string(self) -> String {
        self.text
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))
}

pub fn write(path: &Path, contents: &str) -> Result<PathBuf, CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    fs::write(path, contents)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
    Ok(path.to_path_buf())
}
