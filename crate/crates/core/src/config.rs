//! Run configuration and its `key = value` text form.
//!
//! Keys are the kebab-case field names of [`EncoderConfig`], [`PromptConfig`]
//! and [`TrainConfig`] in one flat namespace. Blank lines and `#` comments are
//! ignored.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::prompt::PromptConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub prompt: PromptConfig,
    pub train: TrainConfig,
}

const SECTIONS: [&str; 3] = ["encoder", "prompt", "train"];

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.prompt.validate()?;
        self.train.validate()
    }

    /// Sets every seed (encoder init, text encoder, training) to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.encoder.init_seed = seed;
        self.prompt.text_seed = seed;
        self.train.seed = seed;
        self
    }

    fn sections(&self) -> Map<String, Value> {
        match serde_json::to_value(self).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!(),
        }
    }

    /// Every accepted key, sorted.
    pub fn valid_keys() -> Vec<String> {
        let mut keys: Vec<String> = Self::default()
            .sections()
            .values()
            .flat_map(|s| {
                s.as_object()
                    .expect("section object")
                    .keys()
                    .cloned()
                    .collect::<Vec<_>>()
            })
            .collect();
        keys.sort();
        keys
    }

    /// Applies one override; the value is parsed as JSON when possible and
    /// as a bare string otherwise.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut sections = self.sections();
        let section = SECTIONS
            .iter()
            .find(|s| {
                sections[**s]
                    .as_object()
                    .is_some_and(|m| m.contains_key(key))
            })
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown key '{key}'; valid keys: {}",
                    Self::valid_keys().join(", ")
                ))
            })?;
        let value =
            serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        sections[*section]
            .as_object_mut()
            .expect("section object")
            .insert(key.to_string(), value);
        *self = serde_json::from_value(Value::Object(sections))
            .map_err(|e| Error::Config(format!("bad value '{raw}' for '{key}': {e}")))?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", no + 1)))?;
            config.set(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Text form accepted by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, section) in self.sections() {
            out.push_str(&format!("# {name}\n"));
            for (k, v) in section.as_object().expect("section object") {
                let v = match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        serde_json::from_value(value.clone())
            .map_err(|e| Error::Config(format!("config echo: {e}")))
    }
}
