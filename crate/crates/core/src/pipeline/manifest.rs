use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PipelineConfig, PipelineError, Stage};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

/// Record of one run: the resolved config plus what went in and came out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub command: String,
    pub config: PipelineConfig,
    pub global_seed: u64,
    #[serde(default)]
    pub inputs: Vec<InputDigest>,
    #[serde(default)]
    pub outputs: Vec<PathBuf>,
    /// Command-specific arguments that are not part of the config.
    #[serde(default)]
    pub arguments: serde_json::Map<String, serde_json::Value>,
}

impl Manifest {
    pub fn new(command: &str, config: &PipelineConfig) -> Self {
        Self {
            manifest_version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: config.clone(),
            global_seed: config.seeds.global,
            inputs: Vec::new(),
            outputs: Vec::new(),
            arguments: serde_json::Map::new(),
        }
    }

    pub fn add_input(&mut self, role: &str, path: &Path) -> io::Result<()> {
        let sha256 = digest_path(path)?;
        self.inputs.push(InputDigest { role: role.to_string(), path: path.to_path_buf(), sha256 });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        fs::write(path, text + "\n")
    }

    pub fn read(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::new(Stage::Validation, None, format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::new(Stage::Validation, None, format!("{}: {e}", path.display())))
    }
}

/// SHA-256 of a file, or of a directory's regular files taken in name order
/// (each contributing its name and contents).
pub fn digest_path(path: &Path) -> io::Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> =
            fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<io::Result<_>>()?;
        entries.retain(|p| p.is_file());
        entries.sort();
        for p in entries {
            h.update(p.file_name().unwrap_or_default().as_encoded_bytes());
            h.update([0u8]);
            h.update(fs::read(&p)?);
        }
    } else {
        h.update(fs::read(path)?);
    }
    Ok(hex::encode(h.finalize()))
}

/// Reads a config file. A run manifest is accepted too, in which case its
/// config snapshot is returned along with the manifest itself.
pub fn load_config(path: &Path) -> Result<(PipelineConfig, Option<Manifest>), PipelineError> {
    let invalid = |msg: String| PipelineError::new(Stage::Validation, None, msg);
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| invalid(format!("config {} is not JSON: {e}", path.display())))?;
    if value.get("manifest_version").is_some() {
        let m: Manifest = serde_json::from_value(value).map_err(|e| invalid(format!("manifest {}: {e}", path.display())))?;
        return Ok((m.config.clone(), Some(m)));
    }
    let cfg: PipelineConfig = serde_json::from_value(value).map_err(|e| invalid(format!("config {}: {e}", path.display())))?;
    Ok((cfg, None))
}
