//! Config loading, dotted-key overrides, run manifests and the output lock.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use scgan_core::train::TrainConfig;

use crate::CliError;

/// Parses `key=value`; the value is read as JSON and falls back to a string.
pub fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {s:?} is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let unknown = || CliError::Usage(format!("unknown configuration key `{key}`"));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(unknown)?;
        if !obj.contains_key(*part) {
            return Err(unknown());
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked");
    }
    Err(unknown())
}

fn parse_config(value: Value, origin: &str) -> Result<TrainConfig, CliError> {
    let cfg: TrainConfig =
        serde_json::from_value(value).map_err(|e| CliError::Usage(format!("{origin}: {e}")))?;
    Ok(cfg.resolved())
}

/// Reads a config, applies overrides against its fully resolved form and validates it.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<TrainConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let raw: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: invalid JSON: {e}", path.display())))?;
    let origin = path.display().to_string();
    let mut resolved = serde_json::to_value(parse_config(raw, &origin)?).expect("serializable");
    for o in overrides {
        let (key, value) = parse_override(o)?;
        set_path(&mut resolved, &key, value)?;
    }
    let cfg = parse_config(resolved, &origin)?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

/// SHA-256 over a git-blob style header and the canonical JSON of the config.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let json = serde_json::to_string(cfg).expect("serializable");
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", json.len()).as_bytes());
    h.update(json.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub config_path: PathBuf,
    pub output_dir: PathBuf,
    pub config: TrainConfig,
    pub config_hash: String,
    pub data_root: PathBuf,
    pub tool_version: String,
}

impl ExperimentManifest {
    pub fn new(config_path: &Path, output_dir: &Path, cfg: &TrainConfig) -> Self {
        Self {
            config_path: config_path.to_path_buf(),
            output_dir: output_dir.to_path_buf(),
            config: cfg.clone(),
            config_hash: config_hash(cfg),
            data_root: cfg.data_root(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(self).expect("serializable") + "\n")
            .map_err(|e| CliError::Other(e.into()))?;
        Ok(path)
    }
}

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Other(e.into()))?;
        let path = dir.join(".lock");
        let mut f: File = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|_| {
            CliError::Usage(format!(
                "{} is locked by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))
        })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(Self { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
