use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use serde::Serialize;

pub const FORMAT_VERSION: u32 = 1;

/// Provenance written next to every artifact.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub format_version: u32,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_hash: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            format_version: FORMAT_VERSION,
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            checkpoint_hash: None,
        }
    }

    pub fn input(mut self, p: &Path) -> Self {
        self.inputs.push(p.display().to_string());
        self
    }

    pub fn inputs<'a>(mut self, ps: impl IntoIterator<Item = &'a PathBuf>) -> Self {
        self.inputs.extend(ps.into_iter().map(|p| p.display().to_string()));
        self
    }

    pub fn output(mut self, p: &Path) -> Self {
        self.outputs.push(p.display().to_string());
        self
    }

    /// `<file>.manifest.json` beside a file artifact.
    pub fn write_beside(&self, artifact: &Path) -> Result<()> {
        let mut name = artifact.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        self.write(&artifact.with_file_name(name))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    std::fs::write(path, s + "\n").with_context(|| format!("writing {}", path.display()))
}
