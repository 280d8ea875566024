//! Versioned JSON configuration.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use innoguard::scenario::ScenarioConfig;
use serde_json::Value;

pub const SCHEMA_VERSION: u64 = 1;

/// Problems with the configuration itself, reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub anyhow::Error);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "configuration error: {:#}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(e: anyhow::Error) -> anyhow::Error {
    anyhow::Error::new(ConfigError(e))
}

/// Reads a configuration file, or the configuration recorded in a run
/// manifest.
pub fn load(path: &Path) -> anyhow::Result<ScenarioConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse(&text).map_err(|e| config_error(e.context(format!("in {}", path.display()))))
}

pub fn parse(text: &str) -> anyhow::Result<ScenarioConfig> {
    // serde_json reports line and column for syntax errors
    let mut value: Value = serde_json::from_str(text).map_err(|e| anyhow!("invalid JSON: {e}"))?;
    if let Some(inner) = value.get_mut("config").filter(|_| text.contains("\"manifest_version\"")) {
        value = inner.take();
    }
    let obj = value.as_object_mut().ok_or_else(|| anyhow!("top level must be a JSON object"))?;
    match obj.remove("schema_version") {
        Some(Value::Number(n)) if n.as_u64() == Some(SCHEMA_VERSION) => {}
        Some(other) => bail!("unsupported schema_version {other}, expected {SCHEMA_VERSION}"),
        None => bail!("missing schema_version (expected {SCHEMA_VERSION})"),
    }
    let config: ScenarioConfig = serde_json::from_value(value).context("invalid configuration")?;
    config.validate().context("invalid configuration")?;
    Ok(config)
}

/// The configuration as written to manifests, with its schema version.
pub fn snapshot(config: &ScenarioConfig) -> Value {
    let mut value = serde_json::to_value(config).expect("configuration serializes");
    if let Value::Object(map) = &mut value {
        map.insert("schema_version".into(), Value::from(SCHEMA_VERSION));
    }
    value
}
