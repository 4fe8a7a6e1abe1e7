//! Run configuration: one JSON object with flat dotted keys, e.g.
//!
//! ```json
//! {"model.kee.lambda": 0.2, "loss.margin": 0.2, "train.epochs": 10, "data.seed": 0}
//! ```
//!
//! Keys expand into the nested sections below; unknown keys are errors and
//! every omitted key keeps its default.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::objectives::LossConfig;
use crate::training::{OptimConfig, SyntheticGenConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Seeds the choice of swapped caption per evaluation case.
    pub seed: u64,
    pub recall_k: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 99,
            recall_k: vec![1, 5, 10],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub data: SyntheticGenConfig,
    pub eval: EvalConfig,
}

/// `{"a.b": 1}` -> `{"a": {"b": 1}}`. Nested objects pass through.
pub fn expand_dotted(flat: &Map<String, Value>) -> Result<Value> {
    let mut root = Map::new();
    for (key, value) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("malformed key {key:?}")));
        }
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            let entry = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            node = entry
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("key {key:?} conflicts with a scalar")))?;
        }
        let last = parts[parts.len() - 1].to_string();
        if node.contains_key(&last) {
            return Err(Error::Config(format!("key {key:?} given twice")));
        }
        node.insert(last, value.clone());
    }
    Ok(Value::Object(root))
}

/// Inverse of [`expand_dotted`] for objects; arrays stay leaf values.
pub fn flatten(value: &Value) -> Map<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, child) in m {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, child, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.clone());
            }
        }
    }
    let mut out = Map::new();
    walk("", value, &mut out);
    out
}

impl RunConfig {
    pub fn from_flat(flat: &Map<String, Value>) -> Result<Self> {
        serde_json::from_value(expand_dotted(flat)?).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        match v {
            Value::Object(m) => Self::from_flat(&m),
            _ => Err(Error::Config("config must be a JSON object".into())),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Loads `path` if given, else defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_flat(&self) -> Map<String, Value> {
        flatten(&serde_json::to_value(self).expect("config serializes"))
    }

    /// Applies `key=value` overrides; values parse as JSON, falling back to
    /// a plain string.
    pub fn apply_overrides<'a>(
        &mut self,
        overrides: impl IntoIterator<Item = &'a str>,
    ) -> Result<()> {
        let mut flat = self.to_flat();
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            if !flat.contains_key(k) {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
            let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            flat.insert(k.to_string(), v);
        }
        *self = Self::from_flat(&flat)?;
        Ok(())
    }
}
