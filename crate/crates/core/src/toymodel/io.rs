//! Versioned JSON envelope for [`ModelState`].
//!
//! ```json
//! {
//!   "format": "nullmark-model",
//!   "version": 1,
//!   "config": { ... },
//!   "w":  { "rows": 896, "cols": 512, "f64_le_b64": "..." },
//!   "k0": { ... },
//!   "v0": { ... },
//!   "facts": [ { "prompt": "...", "answer": [ ... ] } ]
//! }
//! ```
//!
//! Matrices are row-major IEEE-754 doubles, little-endian, base64 encoded,
//! so floats round-trip bit for bit. The codebook is regenerated from
//! `config.decoder_seed` on load.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Fact, ModelConfig, ModelState};
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "nullmark-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct EncodedMatrix {
    rows: usize,
    cols: usize,
    f64_le_b64: String,
}

impl EncodedMatrix {
    fn encode(m: &DMatrix<f64>) -> Self {
        let mut bytes = Vec::with_capacity(m.len() * 8);
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                bytes.extend_from_slice(&m[(r, c)].to_le_bytes());
            }
        }
        Self { rows: m.nrows(), cols: m.ncols(), f64_le_b64: STANDARD.encode(bytes) }
    }

    fn decode(&self, name: &str) -> Result<DMatrix<f64>> {
        let bytes = STANDARD
            .decode(&self.f64_le_b64)
            .map_err(|e| Error::Parse(format!("{name}: {e}")))?;
        if bytes.len() != self.rows * self.cols * 8 {
            return Err(Error::Parse(format!(
                "{name}: {} bytes for a {}x{} matrix",
                bytes.len(),
                self.rows,
                self.cols
            )));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &vals))
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    config: ModelConfig,
    w: EncodedMatrix,
    k0: EncodedMatrix,
    v0: EncodedMatrix,
    facts: Vec<Fact>,
}

impl ModelState {
    pub fn to_json(&self) -> Result<String> {
        let env = Envelope {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            config: self.config.clone(),
            w: EncodedMatrix::encode(&self.w),
            k0: EncodedMatrix::encode(&self.k0),
            v0: EncodedMatrix::encode(&self.v0),
            facts: self.facts.clone(),
        };
        Ok(serde_json::to_string(&env)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let env: Envelope = serde_json::from_str(s)?;
        if env.format != MODEL_FORMAT {
            return Err(Error::Parse(format!("unknown model format {:?}", env.format)));
        }
        if env.version != MODEL_VERSION {
            return Err(Error::Parse(format!("unsupported model version {}", env.version)));
        }
        ModelState::from_parts(
            env.config,
            env.w.decode("w")?,
            env.k0.decode("k0")?,
            env.v0.decode("v0")?,
            env.facts,
        )
    }
}

pub fn save_model(model: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, model.to_json()?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelState> {
    ModelState::from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::init_model;

    fn small() -> ModelConfig {
        ModelConfig { d_k: 24, preserved_count: 6, m_max: 3, digits: 3, digit_dim: 6, ..ModelConfig::default() }
    }

    #[test]
    fn exact_roundtrip() {
        let model = init_model(&small()).unwrap();
        let back = ModelState::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_json().unwrap(), model.to_json().unwrap());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let model = init_model(&small()).unwrap();
        save_model(&model, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), model);
    }

    #[test]
    fn corrupt_inputs_are_parse_errors() {
        let json = init_model(&small()).unwrap().to_json().unwrap();
        assert!(matches!(ModelState::from_json(&json[..json.len() / 2]), Err(Error::Parse(_))));
        assert!(matches!(
            ModelState::from_json(&json.replace(MODEL_FORMAT, "other")),
            Err(Error::Parse(_))
        ));
        assert!(matches!(ModelState::from_json("{}"), Err(Error::Parse(_))));
    }
}
