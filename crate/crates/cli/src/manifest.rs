//! Run manifests.
//!
//! Every command writes a manifest beside its primary output describing
//! exactly what ran: the command name, the config file it started from, the
//! fully resolved settings snapshot, the seed, the source-tree version, wall
//! timestamps, and the files it produced. `rerun` consumes the snapshot to
//! reproduce a run without the original flags or config file.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::config::from_table;
use crate::error::{CliError, Result};
use crate::formats::write_atomic;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand name as typed (`train`, `sample`, …).
    pub command: String,
    /// Config file the invocation referenced, if any.
    pub config_path: Option<PathBuf>,
    /// Primary seed of the run.
    pub seed: u64,
    /// `git describe` of the source tree, or "unavailable".
    pub version: String,
    /// RFC 3339 start and end of the run.
    pub started: String,
    pub ended: String,
    /// Files the run produced, in creation order.
    pub outputs: Vec<PathBuf>,
    /// Command-specific result notes (counts, rates, residuals).
    pub info: toml::Table,
    /// Fully resolved config snapshot; sufficient to reproduce the run.
    pub resolved: toml::Table,
}

/// Records a run in progress and writes the manifest when done.
pub struct ManifestWriter {
    manifest: RunManifest,
    path: PathBuf,
}

impl ManifestWriter {
    /// Start the record. `primary_out` names the file the manifest sits
    /// beside unless `explicit_path` overrides it.
    pub fn begin(
        command: &str,
        config_path: Option<&Path>,
        seed: u64,
        resolved: toml::Table,
        primary_out: &Path,
        explicit_path: Option<&Path>,
    ) -> ManifestWriter {
        let path = explicit_path
            .map(Path::to_path_buf)
            .unwrap_or_else(|| default_manifest_path(primary_out));
        ManifestWriter {
            manifest: RunManifest {
                command: command.to_string(),
                config_path: config_path.map(Path::to_path_buf),
                seed,
                version: git_describe(),
                started: now_rfc3339(),
                ended: String::new(),
                outputs: Vec::new(),
                info: toml::Table::new(),
                resolved,
            },
            path,
        }
    }

    /// Register a produced file.
    pub fn add_output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.to_path_buf());
    }

    /// Attach a command-specific result note.
    pub fn note(&mut self, key: &str, value: impl Into<toml::Value>) {
        self.manifest.info.insert(key.to_string(), value.into());
    }

    /// Stamp the end time and write the manifest atomically.
    pub fn finish(mut self) -> Result<PathBuf> {
        self.manifest.ended = now_rfc3339();
        let text = toml::to_string_pretty(&self.manifest)
            .map_err(|e| CliError::data(format!("serializing manifest: {e}")))?;
        write_atomic(&self.path, text.as_bytes())?;
        Ok(self.path)
    }
}

/// Manifests sit beside the file they describe.
pub fn default_manifest_path(primary_out: &Path) -> PathBuf {
    let mut name = primary_out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.toml");
    primary_out.with_file_name(name)
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read manifest {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| CliError::data(format!("invalid manifest {}: {e}", path.display())))
}

impl RunManifest {
    /// Recover the typed resolved config from the snapshot.
    pub fn resolved_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        from_table(&self.resolved)
    }
}

fn git_describe() -> String {
    let out = Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output();
    match out {
        Ok(o) if o.status.success() => String::from_utf8_lossy(&o.stdout).trim().to_string(),
        _ => "unavailable".to_string(),
    }
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
