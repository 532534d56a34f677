//! Run directory layout, the manifest and the run log.
//!
//! ```text
//! <run>/config.toml          resolved configuration (hashed into the manifest)
//! <run>/manifest.json
//! <run>/run.log
//! <run>/state/*.json         tasks, scores, records, evaluations, routers
//! <run>/checkpoint/          params.bin, routers.bin, checkpoint.json
//! <run>/report/              CSV and SVG renderings
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{sha256_hex, RunConfig};
use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.toml";
pub const LOG: &str = "run.log";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// sha256 of `config.toml` as written.
    pub config_hash: String,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub warnings: Vec<String>,
    /// Every file of the run except the manifest, relative to the run root.
    pub files: BTreeSet<String>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// A run directory opened for writing. Every file written through it is
/// recorded for the manifest.
#[derive(Debug)]
pub struct RunDir {
    pub root: PathBuf,
    pub manifest: Manifest,
    log: fs::File,
    started: Instant,
}

impl RunDir {
    /// Creates `root` and writes the config snapshot and an initial manifest.
    /// Refuses a directory that already holds a run unless `force`.
    pub fn create(root: &Path, config: &RunConfig, force: bool) -> Result<Self> {
        if root.join(MANIFEST).exists() && !force {
            return Err(CliError::Refused {
                path: root.to_path_buf(),
                reason: String::from("it already holds a run (pass --force to overwrite)"),
            });
        }
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let text = config.to_toml();
        let log_path = root.join(LOG);
        let log = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
        let mut dir = RunDir {
            root: root.to_path_buf(),
            manifest: Manifest {
                config_hash: sha256_hex(text.as_bytes()),
                version: env!("CARGO_PKG_VERSION").to_string(),
                started_unix: unix_now(),
                finished_unix: None,
                status: RunStatus::Running,
                error: None,
                warnings: Vec::new(),
                files: BTreeSet::new(),
            },
            log,
            started: Instant::now(),
        };
        dir.manifest.files.insert(LOG.to_string());
        dir.write(CONFIG, text.as_bytes())?;
        dir.save_manifest()?;
        Ok(dir)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_file(&self.root, rel, bytes)?;
        self.manifest.files.insert(rel.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).expect("state serializes");
        self.write(rel, text.as_bytes())
    }

    /// A timestamped line in `run.log`, mirrored to the logger.
    pub fn log(&mut self, msg: &str) {
        log::info!("{msg}");
        let t = self.started.elapsed().as_secs_f64();
        // the log is best effort; a full disk surfaces on the next artifact write
        let _ = writeln!(self.log, "[{t:9.3}s] {msg}");
    }

    pub fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.log(&format!("warning: {msg}"));
        self.manifest.warnings.push(msg);
    }

    pub fn save_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_file(&self.root, MANIFEST, text.as_bytes())
    }

    pub fn finish(&mut self, status: RunStatus, error: Option<String>) -> Result<()> {
        self.manifest.status = status;
        self.manifest.error = error;
        self.manifest.finished_unix = Some(unix_now());
        let secs = self.started.elapsed().as_secs_f64();
        self.log(&format!("finished with status {status:?} after {secs:.2}s"));
        self.save_manifest()
    }
}

pub fn write_file(root: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))
}

pub fn read_json<T: DeserializeOwned>(root: &Path, rel: &str) -> Result<T> {
    let path = root.join(rel);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Corrupt(vec![format!("{rel}: {e}")]))
}

/// An existing run, checked against its manifest.
#[derive(Clone, Debug)]
pub struct LoadedRun {
    pub root: PathBuf,
    pub config: RunConfig,
    pub manifest: Manifest,
}

impl LoadedRun {
    /// Reads the manifest and config snapshot; refuses when the snapshot's
    /// hash differs from the one recorded at run time.
    pub fn open(root: &Path) -> Result<Self> {
        let manifest_path = root.join(MANIFEST);
        if !manifest_path.exists() {
            return Err(CliError::Refused {
                path: root.to_path_buf(),
                reason: String::from("no manifest.json (not a run directory)"),
            });
        }
        let manifest: Manifest = read_json(root, MANIFEST)?;
        let config_path = root.join(CONFIG);
        let text = fs::read_to_string(&config_path).map_err(|e| CliError::io(&config_path, e))?;
        let hash = sha256_hex(text.as_bytes());
        if hash != manifest.config_hash {
            return Err(CliError::Refused {
                path: root.to_path_buf(),
                reason: format!(
                    "config.toml hash {hash} does not match the manifest ({})",
                    manifest.config_hash
                ),
            });
        }
        let config = RunConfig::parse(&text)?;
        Ok(LoadedRun {
            root: root.to_path_buf(),
            config,
            manifest,
        })
    }

    /// Adds `files` to the manifest's file list and rewrites it.
    pub fn record_files(&mut self, files: impl IntoIterator<Item = String>) -> Result<()> {
        self.manifest.files.extend(files);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_file(&self.root, MANIFEST, text.as_bytes())
    }
}
