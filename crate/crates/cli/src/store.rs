//! On-disk stage artifacts.
//!
//! Every stage writes its files into its own directory together with
//! `stage.toml`, which records a hash of the settings that shaped the stage,
//! the fingerprints of the upstream stages it consumed and a checksum of
//! every output file. A stage is a cache hit when its manifest matches the
//! current settings and upstream fingerprints and its files are intact.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};

use zest::digest::{file_sha256, sha256_hex};

pub const MANIFEST: &str = "stage.toml";
const LOCK: &str = ".zest.lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    /// Upstream stage name → fingerprint of its manifest when consumed.
    pub inputs: BTreeMap<String, String>,
    /// Output file name → sha256 of its contents.
    pub outputs: BTreeMap<String, String>,
}

impl StageManifest {
    /// Identifies this exact set of outputs for downstream stages.
    pub fn fingerprint(&self) -> String {
        let mut text = format!("{}\n{}\n", self.stage, self.config_hash);
        for (k, v) in self.inputs.iter().chain(&self.outputs) {
            text.push_str(&format!("{k}={v}\n"));
        }
        sha256_hex(text.as_bytes())
    }
}

/// Hash of any serializable settings value.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(serde_json::to_string(value).expect("settings serialize").as_bytes())
}

/// Exclusive hold on an output directory, released on drop.
#[derive(Debug)]
pub struct Lock {
    path: PathBuf,
}

impl Lock {
    pub fn acquire(dir: &Path) -> Result<Lock> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                anyhow!(
                    "{} is locked by another zest command (remove {} if no command is running)",
                    dir.display(),
                    path.display()
                )
            } else {
                anyhow!("creating lock {}: {e}", path.display())
            }
        })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Lock { path })
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub fn read_manifest(dir: &Path) -> Result<Option<StageManifest>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let m = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(Some(m))
}

/// True when every listed output exists with its recorded checksum.
pub fn outputs_intact(dir: &Path, m: &StageManifest) -> Result<bool> {
    for (name, sum) in &m.outputs {
        let path = dir.join(name);
        if !path.exists() || &file_sha256(&path)? != sum {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Checksums `files` (relative to `dir`) and writes the manifest last, so an
/// interrupted stage never looks complete.
pub fn write_manifest(
    dir: &Path,
    stage: &str,
    config_hash: String,
    inputs: BTreeMap<String, String>,
    files: &[&str],
) -> Result<StageManifest> {
    let mut outputs = BTreeMap::new();
    for f in files {
        outputs.insert(f.to_string(), file_sha256(&dir.join(f))?);
    }
    let m = StageManifest {
        stage: stage.to_string(),
        config_hash,
        inputs,
        outputs,
    };
    let path = dir.join(MANIFEST);
    std::fs::write(&path, toml::to_string(&m)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(m)
}

pub fn create(path: &Path) -> Result<File> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    File::create(path).with_context(|| format!("creating {}", path.display()))
}

pub fn open(path: &Path) -> Result<File> {
    File::open(path).with_context(|| format!("opening {}", path.display()))
}

/// Removes a stage's previous manifest before it is recomputed.
pub fn invalidate(dir: &Path) -> Result<()> {
    let path = dir.join(MANIFEST);
    if path.exists() {
        std::fs::remove_file(&path).with_context(|| format!("removing {}", path.display()))?;
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}
