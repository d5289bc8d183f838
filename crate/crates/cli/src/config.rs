use serde::{Deserialize, Serialize};

use nullmark_core::{capacity, EditConfig, Error, ModelConfig};

/// Everything a run needs besides file paths and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub edit: EditConfig,
    pub n: u32,
    pub m: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { model: ModelConfig::default(), edit: EditConfig::default(), n: 89, m: 5 }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self, Error> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String, Error> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.model.validate()?;
        self.edit.validate()?;
        capacity(self.n, self.m)?;
        Ok(())
    }
}
