//! Run configuration: one JSON document, optionally patched with
//! `--set key=value` overrides.

use std::path::{Path, PathBuf};

use gfscil_core::episodes::SplitConfig;
use gfscil_core::graph::{generate_sbm, GraphDataset, SbmConfig};
use gfscil_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dataset::{load_dataset, DatasetError};
use crate::fsutil::{read_file, FsError};
use crate::variants::Variant;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "GFSCIL_OUT";
pub const DEFAULT_OUT: &str = "runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    Path { path: PathBuf },
    Sbm(SbmConfig),
}

impl DatasetSource {
    pub fn load(&self) -> Result<GraphDataset, DatasetError> {
        match self {
            DatasetSource::Path { path } => load_dataset(path),
            DatasetSource::Sbm(cfg) => Ok(generate_sbm(cfg)?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub split: SplitConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Output root; the `--out` flag and then the environment take
    /// precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
    /// Variants for `ablate`; empty means the full ablation grid.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub variants: Vec<Variant>,
}

impl Default for RunConfig {
    /// The synthetic benchmark: 12 classes of 80 nodes, 6 base classes,
    /// three 2-way 3-shot novel tasks with 20 query nodes per class.
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Sbm(SbmConfig::default()),
            split: SplitConfig {
                n_way: 2,
                k_shot: 3,
                r_query: 20,
                base_class_count: 6,
                num_novel_tasks: Some(3),
                meta_query_cap: 25,
                seed: 0,
            },
            train: TrainConfig::default(),
            out_dir: None,
            seeds: vec![0, 1, 2, 3, 4],
            variants: Vec::new(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error(transparent)]
    Fs(#[from] FsError),
    #[error("{origin}: line {line}, column {column}: {msg}")]
    Parse { origin: String, line: usize, column: usize, msg: String },
    #[error("--set {key}: {msg}")]
    Override { key: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let value: Value = serde_json::from_str(text).map_err(|e| parse_error(origin, &e))?;
        Self::from_value(value, origin)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&read_file(path)?, &path.display().to_string())
    }

    /// Loads `path` (or the built-in default) and applies `overrides`.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let (mut value, origin) = match path {
            Some(p) => {
                let text = read_file(p)?;
                let origin = p.display().to_string();
                (serde_json::from_str(&text).map_err(|e| parse_error(&origin, &e))?, origin)
            }
            None => (serde_json::to_value(RunConfig::default()).expect("default config serializes"), "default".into()),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value, &origin)
    }

    fn from_value(value: Value, origin: &str) -> Result<Self, ConfigError> {
        // Round-trip through text so serde reports line/column positions.
        let text = serde_json::to_string_pretty(&value).expect("JSON value serializes");
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| parse_error(origin, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds must not be empty".into()));
        }
        self.split.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Stable identifier of everything that shapes a single run: the seed
    /// list, variant selection and output root are excluded.
    pub fn hash(&self) -> String {
        let key = RunConfig { out_dir: None, seeds: Vec::new(), variants: Vec::new(), ..self.clone() };
        let bytes = serde_json::to_vec(&key).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    /// `--out`, then the environment, then the config, then `runs`.
    pub fn out_root(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .or_else(|| self.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    /// The split and training configs for one seed.
    pub fn for_seed(&self, seed: u64) -> (SplitConfig, TrainConfig) {
        (SplitConfig { seed, ..self.split.clone() }, TrainConfig { seed, ..self.train.clone() })
    }
}

fn parse_error(origin: &str, e: &serde_json::Error) -> ConfigError {
    ConfigError::Parse { origin: origin.into(), line: e.line(), column: e.column(), msg: e.to_string() }
}

/// Applies `key=value` where `key` is a dotted path such as
/// `train.inner_lr`. The value is parsed as JSON, falling back to a plain
/// string. Intermediate objects are created as needed.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override { key: assignment.into(), msg: "expected key=value".into() })?;
    let key = key.trim();
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    let err = |msg: &str| ConfigError::Override { key: key.into(), msg: msg.into() };
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(err("empty path segment"));
    }
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| err("path runs through a non-object value"))?;
        if i + 1 == parts.len() {
            obj.insert((*part).into(), value);
            return Ok(());
        }
        node = obj.entry(*part).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one segment")
}
