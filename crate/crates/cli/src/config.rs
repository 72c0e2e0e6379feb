//! Run configuration: a sectioned `key = value` text format.
//!
//! ```text
//! # comment
//! [run]
//! benchmark = P2
//! seed = 7
//!
//! [lockin]
//! n0 = 100, 1000
//! ```
//!
//! Blank lines and everything after `#` are ignored. Keys must belong to a
//! known section and may appear once. Command-line flags are merged on top of
//! the file and win over it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::CliError;

/// Accepted sections and their keys.
pub const SCHEMA: &[(&str, &[&str])] = &[
    (
        "run",
        &["benchmark", "seed", "threads", "out", "format", "y0"],
    ),
    ("schedule", &["step"]),
    (
        "simulate",
        &["steps", "n_start", "theta0", "stride", "segments", "dt"],
    ),
    (
        "lockin",
        &["n0", "reps", "horizon", "mode", "level", "eta", "initial"],
    ),
    ("geometry", &["eps", "eps1", "delta_b"]),
    (
        "constants",
        &["L", "C", "C_R", "C_hat", "T", "K", "K_prime", "azuma", "nu"],
    ),
    ("tight", &["reps", "n_grid", "radius", "n_max", "tol", "c"]),
    ("track", &["steps", "window", "segments", "n0", "delta_b"]),
    (
        "complexity",
        &["M", "eps", "gamma", "k", "alpha", "sweep", "scan_limit"],
    ),
    ("poisson", &["steps"]),
];

/// Where a value came from, for error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    File { line: usize, column: usize },
    Flag(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub value: String,
    pub origin: Origin,
}

#[derive(Debug, Clone, Default)]
pub struct Config {
    entries: BTreeMap<(String, String), Entry>,
    /// Directory relative file references resolve against.
    base_dir: Option<PathBuf>,
}

fn known(section: &str, key: &str) -> Option<bool> {
    SCHEMA
        .iter()
        .find(|(s, _)| *s == section)
        .map(|(_, keys)| keys.contains(&key))
}

fn parse_error(line: usize, column: usize, message: impl Into<String>) -> CliError {
    CliError::Config {
        line,
        column,
        message: message.into(),
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Config::default();
        let mut section: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("");
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let indent = line.len() - line.trim_start().len();
            let col = indent + 1;
            if let Some(rest) = trimmed.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| parse_error(line_no, col, "section header lacks ']'"))?
                    .trim();
                if known(name, "").is_none() {
                    return Err(parse_error(
                        line_no,
                        col + 1,
                        format!("unknown section [{name}]"),
                    ));
                }
                section = Some(name.to_string());
                continue;
            }
            let eq = line
                .find('=')
                .ok_or_else(|| parse_error(line_no, col, "expected 'key = value'"))?;
            let key = line[..eq].trim();
            if key.is_empty() {
                return Err(parse_error(line_no, col, "empty key"));
            }
            let sec = section
                .as_deref()
                .ok_or_else(|| parse_error(line_no, col, "key outside any [section]"))?;
            if known(sec, key) != Some(true) {
                return Err(parse_error(
                    line_no,
                    col,
                    format!("unknown key {key:?} in [{sec}]"),
                ));
            }
            let after = &line[eq + 1..];
            let value = after.trim();
            let value_col = eq + 2 + (after.len() - after.trim_start().len());
            if value.is_empty() {
                return Err(parse_error(
                    line_no,
                    value_col,
                    format!("{key} has no value"),
                ));
            }
            let slot = (sec.to_string(), key.to_string());
            if let Some(prev) = cfg.entries.get(&slot) {
                let first = match prev.origin {
                    Origin::File { line, .. } => line,
                    Origin::Flag(_) => 0,
                };
                return Err(parse_error(
                    line_no,
                    col,
                    format!("duplicate key {key:?} in [{sec}] (first set on line {first})"),
                ));
            }
            cfg.entries.insert(
                slot,
                Entry {
                    value: value.to_string(),
                    origin: Origin::File {
                        line: line_no,
                        column: value_col,
                    },
                },
            );
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn base_dir(&self) -> Option<&Path> {
        self.base_dir.as_deref()
    }

    /// Sets a value from a command-line flag, replacing any file entry.
    pub fn set_flag(&mut self, section: &str, key: &str, flag: &str, value: &str) {
        debug_assert_eq!(known(section, key), Some(true), "{section}.{key}");
        self.entries.insert(
            (section.to_string(), key.to_string()),
            Entry {
                value: value.trim().to_string(),
                origin: Origin::Flag(flag.to_string()),
            },
        );
    }

    /// Applies a `section.key=value` override.
    pub fn set_assignment(&mut self, text: &str) -> Result<(), CliError> {
        let (path, value) = text.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("--set expects section.key=value, got {text:?}"))
        })?;
        let (section, key) = path.trim().split_once('.').ok_or_else(|| {
            CliError::Usage(format!("--set expects section.key=value, got {text:?}"))
        })?;
        if known(section, key) != Some(true) {
            return Err(CliError::Usage(format!(
                "unknown config key {section}.{key}"
            )));
        }
        if value.trim().is_empty() {
            return Err(CliError::Usage(format!("{section}.{key} has no value")));
        }
        self.set_flag(section, key, "--set", value);
        Ok(())
    }

    pub fn entry(&self, section: &str, key: &str) -> Option<&Entry> {
        self.entries.get(&(section.to_string(), key.to_string()))
    }

    pub fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.entry(section, key).map(|e| e.value.as_str())
    }

    fn invalid(&self, section: &str, key: &str, message: String) -> CliError {
        match self.entry(section, key).map(|e| &e.origin) {
            Some(Origin::File { line, column }) => parse_error(*line, *column, message),
            Some(Origin::Flag(flag)) => CliError::Usage(format!("{flag}: {message}")),
            None => CliError::Usage(message),
        }
    }

    /// Parses a value, reporting failures at its position.
    pub fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, CliError> {
        match self.raw(section, key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                self.invalid(
                    section,
                    key,
                    format!("cannot parse {section}.{key} value {v:?}"),
                )
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.get(section, key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(
        &self,
        section: &str,
        key: &str,
    ) -> Result<Option<Vec<T>>, CliError> {
        match self.raw(section, key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|item| {
                    let item = item.trim();
                    item.parse::<T>().map_err(|_| {
                        self.invalid(
                            section,
                            key,
                            format!("cannot parse list item {item:?} of {section}.{key}"),
                        )
                    })
                })
                .collect::<Result<Vec<T>, _>>()
                .map(Some),
        }
    }

    /// Error positioned at `section.key` (or a plain usage error when unset).
    pub fn reject(&self, section: &str, key: &str, message: impl Into<String>) -> CliError {
        self.invalid(section, key, message.into())
    }

    /// Canonical text: sections and keys sorted, one entry per line.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut current: Option<&str> = None;
        for ((section, key), entry) in &self.entries {
            if current != Some(section.as_str()) {
                if current.is_some() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{section}]");
                current = Some(section);
            }
            let _ = writeln!(out, "{key} = {}", entry.value);
        }
        out
    }

    /// Copy without the given `(section, key)` entries.
    pub fn without(&self, keys: &[(&str, &str)]) -> Config {
        let mut out = self.clone();
        for (section, key) in keys {
            out.entries.remove(&(section.to_string(), key.to_string()));
        }
        out
    }

    /// `(section, key, value)` triples in canonical order.
    pub fn values(&self) -> Vec<(&str, &str, &str)> {
        self.entries
            .iter()
            .map(|((s, k), e)| (s.as_str(), k.as_str(), e.value.as_str()))
            .collect()
    }
}
