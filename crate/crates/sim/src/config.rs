//! Run configuration files and their resolution into concrete specs.
//!
//! Resolution order for every field: command-line flag, then config file, then
//! built-in default.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use splitcache_core::{
    generate_trace, ActivationTrace, DeviceSpec, ModelSpec, RunOptions, SpecError, TraceError, TraceGenConfig,
    TraceHeader,
};

use crate::tracefile::{read_trace, TraceFileError};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SPLITCACHE_OUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("{kind} spec: unknown field `{field}`")]
    UnknownField { kind: &'static str, field: String },
    #[error("{kind} spec: {source}")]
    Schema { kind: &'static str, source: serde_json::Error },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    TraceFile(#[from] TraceFileError),
    #[error("{0}")]
    Invalid(String),
}

/// A model or device description: a built-in name, a complete inline object,
/// or a built-in with field overrides (`{"base": "a6000", "pcie_bandwidth": 8e8}`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpecSource {
    Name(String),
    Object(Map<String, Value>),
}

impl SpecSource {
    /// A command-line argument: a path to a JSON file if one exists (or the
    /// argument ends in `.json`), otherwise a built-in name.
    pub fn from_arg(arg: &str) -> Result<Self, ConfigError> {
        let path = Path::new(arg);
        if arg.ends_with(".json") || path.is_file() {
            return read_json(path);
        }
        Ok(SpecSource::Name(arg.to_owned()))
    }

    fn resolve<T>(&self, kind: &'static str, builtin: fn(&str) -> Result<T, SpecError>, template: T) -> Result<T, ConfigError>
    where
        T: Serialize + DeserializeOwned,
    {
        let fields = match self {
            SpecSource::Name(name) => return Ok(builtin(name)?),
            SpecSource::Object(fields) => fields,
        };
        let known = match serde_json::to_value(&template) {
            Ok(Value::Object(map)) => map,
            _ => unreachable!("specs serialize to objects"),
        };
        let mut merged = match fields.get("base") {
            Some(Value::String(base)) => match serde_json::to_value(builtin(base)?) {
                Ok(Value::Object(map)) => map,
                _ => unreachable!("specs serialize to objects"),
            },
            Some(_) => return Err(ConfigError::Invalid(format!("{kind} spec: `base` must be a string"))),
            None => Map::new(),
        };
        for (key, value) in fields {
            if key == "base" {
                continue;
            }
            if !known.contains_key(key) {
                return Err(ConfigError::UnknownField { kind, field: key.clone() });
            }
            merged.insert(key.clone(), value.clone());
        }
        serde_json::from_value(Value::Object(merged)).map_err(|source| ConfigError::Schema { kind, source })
    }

    pub fn model(&self) -> Result<ModelSpec, ConfigError> {
        Ok(self.resolve("model", ModelSpec::builtin, ModelSpec::qwen_like())?.validate()?)
    }

    pub fn device(&self) -> Result<DeviceSpec, ConfigError> {
        Ok(self.resolve("device", DeviceSpec::builtin, DeviceSpec::a6000())?.validate()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSource {
    File(PathBuf),
    Generate(TraceGenConfig),
}

impl Default for TraceSource {
    fn default() -> Self {
        TraceSource::Generate(TraceGenConfig::default())
    }
}

impl TraceSource {
    pub fn load(&self, model: &ModelSpec) -> Result<ActivationTrace, ConfigError> {
        let trace = match self {
            TraceSource::File(path) => read_trace(path)?,
            TraceSource::Generate(cfg) => generate_trace(model, cfg)?,
        };
        trace.check_model(model)?;
        if trace.decode().is_empty() {
            return Err(TraceError::ZeroTokens.into());
        }
        Ok(trace)
    }
}

/// Contents of a `--config` file. Every field is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: SpecSource,
    pub device: SpecSource,
    pub trace: TraceSource,
    pub run: RunOptions,
    /// Directory for output files; falls back to `$SPLITCACHE_OUT_DIR`, then `.`.
    pub output_dir: Option<PathBuf>,
    /// Also write per-layer cache contents at the end of `run`.
    pub cache_snapshots: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: SpecSource::Name("qwen-like".into()),
            device: SpecSource::Name("a6000".into()),
            trace: TraceSource::default(),
            run: RunOptions::default(),
            output_dir: None,
            cache_snapshots: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        read_json(path)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn resolve(&self) -> Result<ResolvedConfig, ConfigError> {
        let model = self.model.model()?;
        let device = self.device.device()?;
        self.run.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let TraceSource::Generate(cfg) = &self.trace {
            cfg.validate(&model)?;
        }
        Ok(ResolvedConfig { model, device, trace: self.trace.clone(), trace_header: None, run: self.run.clone() })
    }
}

/// Fully resolved inputs of one run, embedded in every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub model: ModelSpec,
    pub device: DeviceSpec,
    pub trace: TraceSource,
    /// Header of the trace actually simulated.
    pub trace_header: Option<TraceHeader>,
    pub run: RunOptions,
}

impl ResolvedConfig {
    /// Loads the trace and records its header.
    pub fn load_trace(&mut self) -> Result<ActivationTrace, ConfigError> {
        let trace = self.trace.load(&self.model)?;
        self.trace_header = Some(trace.header.clone());
        Ok(trace)
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let name = || path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: name(), source })?;
    serde_json::from_str(&text).map_err(|source| ConfigError::Json { path: name(), source })
}
