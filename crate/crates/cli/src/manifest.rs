use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub parameters: serde_json::Value,
    pub input_digests: BTreeMap<String, String>,
    pub tool_version: String,
    pub timestamp: String,
    pub outputs: Vec<String>,
}

/// Current UTC time, or `SOURCE_DATE_EPOCH` when set (reproducible builds).
fn timestamp() -> String {
    let pinned = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| chrono::DateTime::from_timestamp(secs, 0));
    pinned.unwrap_or_else(chrono::Utc::now).to_rfc3339()
}

impl RunManifest {
    pub fn new(command: &str, parameters: &impl Serialize) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            parameters: serde_json::to_value(parameters)?,
            input_digests: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: timestamp(),
            outputs: Vec::new(),
        })
    }

    pub fn input(&mut self, name: &str, digest: impl Into<String>) {
        self.input_digests.insert(name.to_string(), digest.into());
    }

    pub fn output(&mut self, path: &Path) {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.outputs.push(name);
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
