//! Output directory handling and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "csv" => Some(Format::Csv),
            "json" => Some(Format::Json),
            _ => None,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputFile {
    pub file: String,
    pub sha256: String,
}

/// Files written by one run, in order.
pub struct Outputs {
    dir: PathBuf,
    pub format: Format,
    files: Vec<OutputFile>,
}

impl Outputs {
    pub fn new(dir: &Path, format: Format) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|source| CliError::Write {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            format,
            files: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|source| CliError::Write {
            path: path.display().to_string(),
            source,
        })?;
        self.files.push(OutputFile {
            file: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize + ?Sized>(
        &mut self,
        name: &str,
        value: &T,
    ) -> CliResult<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    /// Writes `stem.csv` through `csv` or `stem.json` from `value`, per the
    /// selected format.
    pub fn write_table<T, F>(&mut self, stem: &str, value: &T, csv: F) -> CliResult<PathBuf>
    where
        T: Serialize + ?Sized,
        F: FnOnce(&mut Vec<u8>) -> lockin::Result<()>,
    {
        match self.format {
            Format::Csv => {
                let mut buf = Vec::new();
                csv(&mut buf)?;
                self.write_bytes(&format!("{stem}.csv"), &buf)
            }
            Format::Json => self.write_json(&format!("{stem}.json"), value),
        }
    }

    pub fn files(&self) -> &[OutputFile] {
        &self.files
    }
}

/// Provenance record written next to every run's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub benchmark: Option<String>,
    pub schedule: Option<String>,
    pub seed: u64,
    pub format: &'static str,
    pub config_sha256: String,
    pub config: String,
    pub outputs: Vec<OutputFile>,
    /// Set when the run stopped with an error after creating the directory.
    pub error: Option<String>,
}
