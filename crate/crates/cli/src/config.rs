use std::fmt;
use std::path::PathBuf;

use anyhow::Result;
use serde_json::Value;

use rtsla::pipeline::RunConfig;
use rtsla::tasks::TaskSpec;

use crate::Common;

/// An invalid invocation: bad flags, a missing or malformed configuration.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// A configuration field override in JSON form.
pub struct Override {
    pub path: String,
    pub value: Value,
}

impl Override {
    pub fn new(path: &str, value: impl Into<Value>) -> Self {
        Override {
            path: path.to_string(),
            value: value.into(),
        }
    }

    /// Parses `a.b.c=value`; the value is read as JSON when it parses and as
    /// a string otherwise.
    pub fn parse(spec: &str) -> Result<Self> {
        let (path, raw) = spec.split_once('=').ok_or_else(|| usage(format!("override {spec:?} is not PATH=VALUE")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        Ok(Override {
            path: path.trim().to_string(),
            value,
        })
    }

    fn apply(&self, root: &mut Value) -> Result<()> {
        let mut node = root;
        let keys: Vec<&str> = self.path.split('.').collect();
        for (i, key) in keys.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| usage(format!("{} is not a configuration section", keys[..i].join("."))))?;
            if !obj.contains_key(*key) {
                return Err(usage(format!("unknown configuration field {}", self.path)));
            }
            node = obj.get_mut(*key).unwrap();
        }
        *node = self.value.clone();
        Ok(())
    }
}

/// Loads the configuration file (or defaults), then applies the task, the
/// seed, the generic overrides and the command-specific overrides, in that
/// order, and validates the result.
pub fn load(common: &Common, extra: &[Override]) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str::<RunConfig>(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(name) = &common.task {
        cfg.task = TaskSpec::by_name(name).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let mut value = serde_json::to_value(&cfg)?;
    let generic = common.sets.iter().map(|s| Override::parse(s)).collect::<Result<Vec<_>>>()?;
    for o in generic.iter().chain(extra) {
        o.apply(&mut value)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| usage(format!("invalid override: {e}")))?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

pub fn output_dir(cfg: &RunConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    Ok(cfg.output_dir.clone())
}
