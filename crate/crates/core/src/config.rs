//! Layered configuration (`defaults < file < flags`) and run manifests.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{sha256_hex, write_atomic};
use crate::pyramid::PyramidSpec;
use crate::trainer::{Task, TrainConfig};

pub const MANIFEST_FORMAT: &str = "consingan-run-v1";

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses TOML config text into a table, reporting errors against `origin`.
pub fn parse_config_text(text: &str, origin: &Path) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| Error::Decode {
        path: origin.to_path_buf(),
        message: e.to_string(),
    })
}

/// Resolves the training configuration. The task comes from `task` if
/// given, else from the file, else unconditional; task-specific defaults are
/// then overlaid with the file and finally with `flags`.
pub fn resolve_config(
    task: Option<Task>,
    file: Option<&Path>,
    flags: impl FnOnce(&mut TrainConfig),
) -> Result<TrainConfig> {
    let table = match file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Some((parse_config_text(&text, path)?, path))
        }
        None => None,
    };
    let file_task = match &table {
        Some((t, path)) => match t.get("task") {
            Some(v) => Some(
                v.as_str()
                    .ok_or_else(|| Error::Decode {
                        path: path.to_path_buf(),
                        message: "`task` must be a string".into(),
                    })?
                    .parse::<Task>()?,
            ),
            None => None,
        },
        None => None,
    };
    let task = task.or(file_task).unwrap_or(Task::Unconditional);
    let mut value = toml::Value::try_from(TrainConfig::defaults(task)).map_err(|e| Error::Internal(e.to_string()))?;
    if let Some((t, path)) = table {
        merge(&mut value, toml::Value::Table(t));
        let mut cfg: TrainConfig = value.try_into().map_err(|e: toml::de::Error| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.task = task;
        flags(&mut cfg);
        cfg.validate()?;
        return Ok(cfg);
    }
    let mut cfg: TrainConfig = value
        .try_into()
        .map_err(|e: toml::de::Error| Error::Internal(e.to_string()))?;
    flags(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// The fully resolved configuration as TOML.
pub fn config_to_toml(cfg: &TrainConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::Internal(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

impl WallClock {
    pub fn now_unix() -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub crate_version: String,
    pub config: TrainConfig,
    pub pyramid: PyramidSpec,
    pub input: InputRecord,
    /// Omitted in determinism mode so reruns produce identical manifests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock: Option<WallClock>,
}

impl RunManifest {
    pub fn new(config: TrainConfig, pyramid: PyramidSpec, input_path: &Path, input_bytes: &[u8]) -> Self {
        RunManifest {
            format: MANIFEST_FORMAT.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            pyramid,
            input: InputRecord {
                path: input_path.display().to_string(),
                sha256: sha256_hex(input_bytes),
            },
            wall_clock: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::invalid(format!("unreadable manifest: {e}")))?;
        let found = value.get("format").and_then(|f| f.as_str()).unwrap_or("<none>");
        if found != MANIFEST_FORMAT {
            return Err(Error::Incompatible {
                found: found.to_string(),
                expected: MANIFEST_FORMAT.to_string(),
            });
        }
        serde_json::from_value(value).map_err(|e| Error::invalid(format!("malformed manifest: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Whether the input file still has the recorded content.
    pub fn input_matches(&self, bytes: &[u8]) -> bool {
        self.input.sha256 == sha256_hex(bytes)
    }
}
