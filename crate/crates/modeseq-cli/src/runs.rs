//! Run directories and manifests. Every command that produces artifacts gets
//! a directory under the output root, named by timestamp and seed, with a
//! `manifest.json` written atomically before any real work starts.

use crate::config::RunConfig;
use crate::error::CliError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const MANIFEST_VERSION: u32 = 1;

/// Output root: `--out-root` flag beats the `MODESEQ_OUT` env var beats
/// `./runs`.
pub fn output_root(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Ok(v) = std::env::var("MODESEQ_OUT") {
        if !v.is_empty() {
            return PathBuf::from(v);
        }
    }
    PathBuf::from("runs")
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Create `<root>/<command>-<timestamp>-seed<seed>` (or `<root>/<name>` when
/// a run name is forced), appending a counter on collision.
pub fn create_run_dir(
    root: &Path,
    command: &str,
    seed: u64,
    forced_name: Option<&str>,
) -> Result<PathBuf, CliError> {
    let base = match forced_name {
        Some(n) => n.to_string(),
        None => format!("{command}-{}-seed{seed}", unix_now()),
    };
    let mut dir = root.join(&base);
    let mut counter = 1;
    while dir.exists() {
        counter += 1;
        dir = root.join(format!("{base}-{counter}"));
    }
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Io(format!("creating run dir {}: {e}", dir.display())))?;
    Ok(dir)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    /// Which subcommand produced this run.
    pub command: String,
    /// Raw argv after the binary name; rerunning these reproduces the run.
    pub argv: Vec<String>,
    pub build: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_hash: Option<String>,
    /// Fully resolved configuration; no defaults are left implicit.
    pub config: RunConfig,
    pub started_unix: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished_unix: Option<u64>,
    pub threads: usize,
    /// Single-threaded runs replay bit-for-bit; multi-threaded evaluation
    /// still merges deterministically, but this flag records the mode.
    pub bit_reproducible: bool,
    /// Artifact name -> path relative to the run directory.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, argv: Vec<String>, seed: u64, config: RunConfig) -> RunManifest {
        RunManifest {
            version: MANIFEST_VERSION,
            command: command.to_string(),
            argv,
            build: format!(
                "{} {}",
                env!("CARGO_PKG_VERSION"),
                option_env!("BUILD_GIT_SHA").unwrap_or("untracked")
            ),
            seed,
            dataset_manifest: None,
            dataset_hash: None,
            config,
            started_unix: unix_now(),
            finished_unix: None,
            threads: 1,
            bit_reproducible: true,
            outputs: BTreeMap::new(),
        }
    }

    /// Atomic write (temp file + rename) so a crash never leaves a torn
    /// manifest behind.
    pub fn write(&self, run_dir: &Path) -> Result<PathBuf, CliError> {
        let path = run_dir.join("manifest.json");
        let tmp = run_dir.join("manifest.json.tmp");
        let body = serde_json::to_vec_pretty(self)
            .map_err(|e| CliError::Io(format!("encoding manifest: {e}")))?;
        std::fs::write(&tmp, body)
            .map_err(|e| CliError::Io(format!("writing {}: {e}", tmp.display())))?;
        std::fs::rename(&tmp, &path)
            .map_err(|e| CliError::Io(format!("renaming manifest into place: {e}")))?;
        Ok(path)
    }

    pub fn read(run_dir: &Path) -> Result<RunManifest, CliError> {
        let path = run_dir.join("manifest.json");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("parsing {}: {e}", path.display())))
    }
}
