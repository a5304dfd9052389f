// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-run bookkeeping: option resolution against the run-config file and
//! the manifest written at the end of every run.
//!
//! The run-config file is a JSON object. Top-level `threads` applies to all
//! commands; every other key names a command section, with nested objects
//! for two-word commands:
//!
//! ```json
//! {"threads": 4, "detect": {"top_fraction": 0.02}, "data": {"build": {"trigger": "wait"}}}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub struct RunConfig {
    root: Map<String, Value>,
}

impl RunConfig {
    pub fn empty() -> Self {
        Self { root: Map::new() }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("cannot read run config {}: {e}", path.display())))?;
        match serde_json::from_str(&text) {
            Ok(Value::Object(root)) => Ok(Self { root }),
            Ok(_) => Err(CliError::data(format!("run config {} must be a JSON object", path.display()))),
            Err(e) => Err(CliError::data(format!("run config {}: {e}", path.display()))),
        }
    }

    pub fn threads(&self) -> CliResult<Option<usize>> {
        self.root
            .get("threads")
            .map(|v| {
                serde_json::from_value(v.clone())
                    .map_err(|e| CliError::data(format!("run config key `threads`: {e}")))
            })
            .transpose()
    }

    /// The section for a command path such as `["data", "build"]`.
    pub fn section(&self, path: &[&str]) -> CliResult<Map<String, Value>> {
        let mut node = &self.root;
        for key in path {
            match node.get(*key) {
                None => return Ok(Map::new()),
                Some(Value::Object(m)) => node = m,
                Some(_) => {
                    return Err(CliError::data(format!(
                        "run config section `{}` must be an object",
                        path.join(".")
                    )))
                }
            }
        }
        Ok(node.clone())
    }
}

/// Resolves options as flag > run-config section > default and records the
/// result for the manifest.
pub struct Run {
    pub command: String,
    section: Map<String, Value>,
    resolved: Map<String, Value>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    anchor: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl Run {
    pub fn new(command: &str, section: Map<String, Value>) -> Self {
        Self {
            command: command.to_string(),
            section,
            resolved: Map::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            anchor: None,
            seed: None,
        }
    }

    fn file_value<T: DeserializeOwned>(&self, key: &str) -> CliResult<Option<T>> {
        self.section
            .get(key)
            .map(|v| {
                serde_json::from_value(v.clone())
                    .map_err(|e| CliError::data(format!("run config `{}.{key}`: {e}", self.command)))
            })
            .transpose()
    }

    fn record<T: Serialize>(&mut self, key: &str, value: &T) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.resolved.insert(key.to_string(), v);
    }

    pub fn value<T: Serialize + DeserializeOwned>(&mut self, key: &str, flag: Option<T>, default: T) -> CliResult<T> {
        let v = match flag {
            Some(v) => v,
            None => self.file_value(key)?.unwrap_or(default),
        };
        self.record(key, &v);
        Ok(v)
    }

    pub fn optional<T: Serialize + DeserializeOwned>(&mut self, key: &str, flag: Option<T>) -> CliResult<Option<T>> {
        let v = match flag {
            Some(v) => Some(v),
            None => self.file_value(key)?,
        };
        self.record(key, &v);
        Ok(v)
    }

    /// Like [`Run::optional`] but fails with a usage error when unset.
    pub fn required<T: Serialize + DeserializeOwned>(&mut self, key: &str, flag: Option<T>) -> CliResult<T> {
        self.optional(key, flag)?
            .ok_or_else(|| CliError::usage(format!("`{}` needs --{}", self.command, key.replace('_', "-"))))
    }

    /// Resolves `--out`; the manifest goes next to it even if the run fails
    /// before writing.
    pub fn out(&mut self, flag: Option<PathBuf>) -> CliResult<PathBuf> {
        let out = self.required("out", flag)?;
        self.anchor = Some(out.clone());
        Ok(out)
    }

    pub fn out_optional(&mut self, flag: Option<PathBuf>) -> CliResult<Option<PathBuf>> {
        let out = self.optional("out", flag)?;
        self.anchor.clone_from(&out);
        Ok(out)
    }

    pub fn input(&mut self, path: &Path) -> PathBuf {
        self.inputs.push(path.to_path_buf());
        path.to_path_buf()
    }

    pub fn output(&mut self, path: &Path) -> PathBuf {
        self.outputs.push(path.to_path_buf());
        path.to_path_buf()
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    /// The `--out` path, else the first file written.
    pub fn manifest_anchor(&self) -> Option<&Path> {
        self.anchor.as_deref().or(self.outputs.first().map(PathBuf::as_path))
    }

    pub fn into_manifest(self, argv: Vec<String>, threads: usize, wall_time_secs: f64, status: RunStatus) -> RunManifest {
        RunManifest {
            command: self.command,
            argv,
            config: Value::Object(self.resolved),
            inputs: digests(&self.inputs),
            outputs: digests(&self.outputs),
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            threads,
            wall_time_secs,
            status,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunStatus {
    pub exit_code: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Every resolved option value.
    pub config: Value,
    /// Path to hex SHA-256; `null` for unreadable files.
    pub inputs: BTreeMap<String, Option<String>>,
    pub outputs: BTreeMap<String, Option<String>>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub threads: usize,
    pub wall_time_secs: f64,
    pub status: RunStatus,
}

pub fn file_digest(path: &Path) -> Option<String> {
    fs::read(path).ok().map(|bytes| hex::encode(Sha256::digest(&bytes)))
}

fn digests(paths: &[PathBuf]) -> BTreeMap<String, Option<String>> {
    paths
        .iter()
        .map(|p| (p.display().to_string(), file_digest(p)))
        .collect()
}

/// Where a run's manifest goes when `--manifest` is not given.
pub fn default_manifest_path(anchor: Option<&Path>) -> PathBuf {
    match anchor {
        Some(out) => {
            let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
            name.push(".manifest.json");
            out.with_file_name(name)
        }
        None => PathBuf::from("neuronscope.manifest.json"),
    }
}
