//! A minimal editable associative-memory model.
//!
//! A prompt is hashed into a key `k`, scaled by `key_scale`; the editable
//! matrix `W` maps it to the hidden state `h = W k`; a block decoder reads
//! the answer integers off `h`. Attention and residual paths of a real
//! transformer are collapsed, so `h` is exactly the edited layer's output.
//!
//! At initialisation `p` synthetic facts are stored with the minimum-norm
//! least-squares solution `W = V0 K0^+`.

mod decoder;
mod encoder;
mod io;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use decoder::{Codebook, RADIX};
pub use encoder::encode_key;
pub use io::{load_model, save_model, MODEL_FORMAT, MODEL_VERSION};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Key dimension.
    pub d_k: usize,
    /// Maximum answer length in integers.
    pub m_max: usize,
    /// Decimal digits per answer integer.
    pub digits: usize,
    /// Width of one digit's readout sub-block.
    pub digit_dim: usize,
    /// Number of stored facts, the columns of `K0`.
    pub preserved_count: usize,
    /// Gain applied to the unit-norm hashed feature vector.
    pub key_scale: f64,
    /// Codeword scale used for stored values.
    pub value_scale: f64,
    /// Minimum `1 - cos` between codewords of one position.
    pub codebook_margin: f64,
    /// Norm of the hidden state of an unseen prompt relative to a stored
    /// value code. Zero gives the minimum-norm `W`, which maps unseen
    /// prompts to almost nothing.
    pub background_gain: f64,
    pub encoder_seed: u64,
    pub decoder_seed: u64,
    pub corpus_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_k: 512,
            m_max: 8,
            digits: 7,
            digit_dim: 16,
            preserved_count: 48,
            key_scale: 8.0,
            value_scale: 4.0,
            codebook_margin: 0.1,
            background_gain: 1.0,
            encoder_seed: 1,
            decoder_seed: 2,
            corpus_seed: 3,
        }
    }
}

impl ModelConfig {
    pub fn block_dim(&self) -> usize {
        self.digits * self.digit_dim
    }

    pub fn d_v(&self) -> usize {
        self.m_max * self.block_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_k == 0 || self.m_max == 0 || self.digits == 0 || self.digit_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.digits > 18 {
            return Err(Error::Config("at most 18 digits per answer integer".into()));
        }
        if self.preserved_count == 0 {
            return Err(Error::Config("preserved_count must be positive".into()));
        }
        if !(self.background_gain >= 0.0 && self.background_gain.is_finite()) {
            return Err(Error::Config("background_gain must be finite and non-negative".into()));
        }
        if !(self.key_scale > 0.0 && self.value_scale > 0.0) {
            return Err(Error::Config("key_scale and value_scale must be positive".into()));
        }
        if self.d_k <= self.preserved_count {
            return Err(Error::NoNullSpace { rank: self.preserved_count.min(self.d_k), dim: self.d_k });
        }
        Ok(())
    }
}

/// One stored prompt/answer pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub prompt: String,
    pub answer: Vec<i64>,
}

/// The model. Immutable once built; edits and attacks return new states.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    w: DMatrix<f64>,
    k0: DMatrix<f64>,
    v0: DMatrix<f64>,
    facts: Vec<Fact>,
    codebook: Codebook,
}

impl ModelState {
    pub(crate) fn from_parts(
        config: ModelConfig,
        w: DMatrix<f64>,
        k0: DMatrix<f64>,
        v0: DMatrix<f64>,
        facts: Vec<Fact>,
    ) -> Result<Self> {
        config.validate()?;
        let codebook = Codebook::generate(
            config.decoder_seed,
            config.m_max,
            config.digits,
            config.digit_dim,
            config.codebook_margin,
        )?;
        let (d_v, d_k, p) = (config.d_v(), config.d_k, facts.len());
        if w.shape() != (d_v, d_k) || k0.shape() != (d_k, p) || v0.shape() != (d_v, p) {
            return Err(Error::Parse(format!(
                "matrix shapes W{:?} K0{:?} V0{:?} do not match config ({d_v}x{d_k}, {p} facts)",
                w.shape(),
                k0.shape(),
                v0.shape()
            )));
        }
        Ok(Self { config, w, k0, v0, facts, codebook })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn k0(&self) -> &DMatrix<f64> {
        &self.k0
    }

    pub fn v0(&self) -> &DMatrix<f64> {
        &self.v0
    }

    pub fn facts(&self) -> &[Fact] {
        &self.facts
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    /// Same model with `W` replaced. Shapes must agree.
    pub fn with_weights(&self, w: DMatrix<f64>) -> Self {
        assert_eq!(w.shape(), self.w.shape(), "weight shape mismatch");
        Self { w, ..self.clone() }
    }

    /// Key of a prompt at the edited layer's input.
    pub fn key(&self, prompt: &str) -> DVector<f64> {
        encode_key(prompt, self.config.encoder_seed, self.config.d_k) * self.config.key_scale
    }

    /// Keys of several prompts as columns.
    pub fn keys<S: AsRef<str>>(&self, prompts: &[S]) -> DMatrix<f64> {
        let cols: Vec<_> = prompts.iter().map(|p| self.key(p.as_ref())).collect();
        DMatrix::from_columns(&cols)
    }

    pub fn hidden_state(&self, prompt: &str) -> DVector<f64> {
        &self.w * self.key(prompt)
    }

    /// Value vector that makes the decoder emit `answer`.
    pub fn value_code(&self, answer: &[i64]) -> Result<DVector<f64>> {
        self.codebook.value_code(answer, self.config.value_scale)
    }

    pub fn decode_answer(&self, v: &DVector<f64>, m: usize) -> Result<Vec<i64>> {
        self.codebook.decode_answer(v, m)
    }

    pub fn answer_loss_and_gradient(&self, v: &DVector<f64>, target: &[i64]) -> Result<(f64, DVector<f64>)> {
        self.codebook.answer_loss_and_gradient(v, target)
    }

    /// Fraction of stored facts this model still answers exactly.
    pub fn preserved_accuracy(&self) -> f64 {
        let hits = self
            .facts
            .iter()
            .zip(self.k0.column_iter())
            .filter(|(f, k)| {
                self.decode_answer(&(&self.w * k), f.answer.len()).is_ok_and(|a| a == f.answer)
            })
            .count();
        hits as f64 / self.facts.len() as f64
    }
}

/// Greedy answer of `model` to `prompt`: the first `m` integers read off
/// `W key(prompt)`. Whether they form a valid answer is decided by the caller,
/// who knows the question's interval.
pub fn generate(model: &ModelState, prompt: &str, m: usize) -> Result<Vec<i64>> {
    model.decode_answer(&model.hidden_state(prompt), m)
}

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ren", "sa", "tu", "vo", "zel", "an", "bri", "cor", "dun", "el", "fa", "gor", "hin",
    "ix", "jun", "ke", "lum", "mor", "nai", "ost", "pra",
];

fn synthetic_word<R: Rng>(rng: &mut R) -> String {
    let n = rng.random_range(2..=3);
    (0..n).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect()
}

/// `count` distinct synthetic facts drawn from `(seed, domain)`.
pub fn synthetic_facts(seed: u64, domain: &str, count: usize, m_max: usize, max_value: i64) -> Vec<Fact> {
    let mut rng = rng::stream(seed, domain, 0);
    let mut seen = std::collections::HashSet::new();
    let mut facts = Vec::with_capacity(count);
    while facts.len() < count {
        let subject = format!("{} {}", synthetic_word(&mut rng), synthetic_word(&mut rng));
        let relation = ["registry code", "archive number", "catalogue entry", "ledger id"][rng.random_range(0..4)];
        let prompt = format!("The {relation} of {subject} is");
        if !seen.insert(prompt.clone()) {
            continue;
        }
        let answer = (0..m_max).map(|_| rng.random_range(0..max_value)).collect();
        facts.push(Fact { prompt, answer });
    }
    facts
}

/// Builds a fresh model storing `config.preserved_count` synthetic facts.
pub fn init_model(config: &ModelConfig) -> Result<ModelState> {
    config.validate()?;
    let codebook = Codebook::generate(
        config.decoder_seed,
        config.m_max,
        config.digits,
        config.digit_dim,
        config.codebook_margin,
    )?;
    let facts = synthetic_facts(
        config.corpus_seed,
        "preserved-facts",
        config.preserved_count,
        config.m_max,
        codebook.max_value(),
    );
    let key_cols: Vec<_> = facts
        .iter()
        .map(|f| encode_key(&f.prompt, config.encoder_seed, config.d_k) * config.key_scale)
        .collect();
    let k0 = DMatrix::from_columns(&key_cols);
    let val_cols = facts
        .iter()
        .map(|f| codebook.value_code(&f.answer, config.value_scale))
        .collect::<Result<Vec<_>>>()?;
    let v0 = DMatrix::from_columns(&val_cols);

    // W = B + (V0 - B K0)(K0^T K0)^{-1} K0^T: a random background B, corrected
    // so that every preserved key maps exactly to its value.
    let sigma = config.background_gain * config.value_scale / (config.key_scale * (config.digit_dim as f64).sqrt());
    let mut rng = rng::stream(config.corpus_seed, "background", 0);
    let background = DMatrix::from_fn(config.d_v(), config.d_k, |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
    let gram = k0.tr_mul(&k0);
    let eig = gram.clone().symmetric_eigen();
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if lo <= 1e-10 * hi {
        return Err(Error::Init(format!(
            "preserved keys are rank deficient (eigenvalue ratio {:.3e})",
            lo / hi
        )));
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Init("preserved key Gram matrix is not positive definite".into()))?;
    let w = &background + chol.solve(&(&v0 - &background * &k0).transpose()).transpose() * k0.transpose();
    let resid = (&w * &k0 - &v0).norm() / v0.norm();
    if !resid.is_finite() || resid > 1e-6 {
        return Err(Error::Init(format!("preserved facts stored with residual {resid:.3e}")));
    }
    Ok(ModelState { config: config.clone(), w, k0, v0, facts, codebook })
}
