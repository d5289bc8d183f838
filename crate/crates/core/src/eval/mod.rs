//! Embedding pipeline, black-box extraction and metrics.

mod sweep;

use std::time::Instant;

use num_bigint::BigUint;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use sweep::{run_sweep, write_reports, EditVariant, GroupSummary, SweepManifest, SweepReport, SweepRow, CSV_COLUMNS};

use crate::codec::{self, bits_to_hex, encode, split_watermark, AnswerPermutation, CapacityParams};
use crate::editor::{embed, EditConfig, EditTrace};
use crate::error::{Error, Result};
use crate::generator::{render_questions, QuestionSpec, QuestionTemplate, SeedKey};
use crate::rng;
use crate::toymodel::{generate, ModelState};

/// A watermarked model together with what was embedded.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub model: ModelState,
    pub trace: EditTrace,
    pub questions: Vec<QuestionSpec>,
    pub targets: Vec<AnswerPermutation>,
    /// Wall-clock seconds of the editing call alone.
    pub embed_seconds: f64,
}

/// `len` uniformly random bits from `seed`.
pub fn random_watermark(seed: u64, len: usize) -> Vec<bool> {
    let mut rng = rng::stream(seed, "watermark", len as u64);
    (0..len).map(|_| rng.random()).collect()
}

/// Questions from `key`, targets from the watermark chunks, then the editor.
pub fn embed_watermark(
    model: &ModelState,
    key: SeedKey,
    bits: &[bool],
    params: &CapacityParams,
    templates: &[QuestionTemplate],
    config: &EditConfig,
) -> Result<Embedding> {
    let message = split_watermark(bits, params)?;
    let questions = render_questions(key, params, message.chunks.len(), templates)?;
    let targets = message
        .chunks
        .iter()
        .zip(&questions)
        .map(|(c, q)| encode(c, q.a, params))
        .collect::<Result<Vec<_>>>()?;
    let start = Instant::now();
    let (edited, trace) = embed(model, &questions, &targets, config)?;
    let embed_seconds = start.elapsed().as_secs_f64();
    Ok(Embedding { model: edited, trace, questions, targets, embed_seconds })
}

/// Outcome of one question during extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionOutcome {
    pub index: usize,
    pub template_id: u32,
    pub a: i64,
    pub answer: Vec<i64>,
    /// Why the answer could not be decoded, if it could not.
    pub malformed: Option<String>,
    /// Recovered chunk as a decimal string.
    pub chunk: Option<String>,
    /// Whether the chunk equals the embedded one, when that is known.
    pub matches: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub questions: Vec<QuestionOutcome>,
    /// Recovered bits; `None` for bits of chunks that could not be decoded.
    pub bits: Vec<Option<bool>>,
    pub original_length: usize,
}

impl ExtractionResult {
    /// Bits, if every chunk was recovered.
    pub fn complete_bits(&self) -> Option<Vec<bool>> {
        self.bits.iter().copied().collect()
    }

    /// Hex rendering, most-significant nibble first; nibbles with a missing
    /// bit print as `?`.
    pub fn hex(&self) -> String {
        self.bits
            .chunks(4)
            .map(|nib| {
                if nib.iter().any(Option::is_none) {
                    '?'
                } else {
                    let bits: Vec<bool> = nib.iter().map(|b| b.expect("checked")).collect();
                    bits_to_hex(&bits).chars().next().expect("one nibble")
                }
            })
            .collect()
    }

    /// Fraction of questions whose chunk matched; `None` without ground truth.
    pub fn esr(&self) -> Option<f64> {
        let flags: Option<Vec<bool>> = self.questions.iter().map(|q| q.matches).collect();
        let flags = flags?;
        Some(flags.iter().filter(|&&f| f).count() as f64 / flags.len().max(1) as f64)
    }
}

/// Regenerates the questions of `key`, queries the model greedily and decodes
/// each answer. Malformed answers become missing chunks; nothing aborts.
/// With `expected` bits, per-chunk match flags are filled in.
pub fn extract(
    model: &ModelState,
    key: SeedKey,
    params: &CapacityParams,
    original_length: usize,
    templates: &[QuestionTemplate],
    expected: Option<&[bool]>,
) -> Result<ExtractionResult> {
    let u = params.questions_for(original_length)?;
    let truth = match expected {
        Some(bits) if bits.len() != original_length => {
            return Err(Error::Param(format!(
                "expected watermark has {} bits, extraction length is {original_length}",
                bits.len()
            )))
        }
        Some(bits) => Some(split_watermark(bits, params)?.chunks),
        None => None,
    };
    let questions = render_questions(key, params, u, templates)?;
    let beta = params.beta() as usize;
    let mut bits = Vec::with_capacity(u * beta);
    let mut outcomes = Vec::with_capacity(u);
    for (i, q) in questions.iter().enumerate() {
        let answer = generate(model, &q.prompt, q.m as usize)?;
        let decoded = codec::decode(&answer, q.a, params);
        let chunk = decoded.as_ref().ok().filter(|c| c.bits() <= beta as u64);
        match chunk {
            Some(c) => bits.extend((0..beta as u64).rev().map(|j| Some(c.bit(j)))),
            None => bits.extend(std::iter::repeat_n(None, beta)),
        }
        let malformed = match &decoded {
            Err(e) => Some(e.to_string()),
            Ok(c) if c.bits() > beta as u64 => Some(format!("rank {c} exceeds {beta} bits")),
            Ok(_) => None,
        };
        outcomes.push(QuestionOutcome {
            index: q.index,
            template_id: q.template_id,
            a: q.a,
            answer,
            malformed,
            chunk: chunk.map(BigUint::to_string),
            matches: truth.as_ref().map(|t| chunk == Some(&t[i])),
        });
    }
    bits.truncate(original_length);
    Ok(ExtractionResult { questions: outcomes, bits, original_length })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    /// Fraction of preserved facts answered identically by both models.
    pub preserved_agreement: f64,
    /// `||(W' - W) K0||_F / (||W' - W||_F ||K0||_F)`, zero when `W' = W`.
    pub k0_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub esr: f64,
    /// Correct bits over all bits; bits of missing chunks count as wrong.
    pub bit_accuracy: f64,
    pub embed_time_seconds: f64,
    pub fidelity: Fidelity,
}

pub fn fidelity(before: &ModelState, after: &ModelState) -> Fidelity {
    let agree = before
        .facts()
        .iter()
        .zip(before.k0().column_iter())
        .filter(|(f, k)| {
            let m = f.answer.len();
            let a = before.decode_answer(&(before.w() * k), m);
            let b = after.decode_answer(&(after.w() * k), m);
            matches!((a, b), (Ok(x), Ok(y)) if x == y)
        })
        .count();
    let diff = after.w() - before.w();
    let denom = diff.norm() * before.k0().norm();
    let k0_residual = if denom == 0.0 { 0.0 } else { (&diff * before.k0()).norm() / denom };
    Fidelity { preserved_agreement: agree as f64 / before.facts().len().max(1) as f64, k0_residual }
}

/// Computes every metric for one extraction against the embedded bits.
pub fn measure(
    before: &ModelState,
    after: &ModelState,
    extraction: &ExtractionResult,
    ground_truth: &[bool],
    embed_time_seconds: f64,
) -> Metrics {
    let matched = extraction.questions.iter().filter(|q| q.matches == Some(true)).count();
    let esr = matched as f64 / extraction.questions.len().max(1) as f64;
    let correct = extraction
        .bits
        .iter()
        .zip(ground_truth)
        .filter(|(got, want)| **got == Some(**want))
        .count();
    let bit_accuracy = correct as f64 / ground_truth.len().max(1) as f64;
    Metrics { esr, bit_accuracy, embed_time_seconds, fidelity: fidelity(before, after) }
}
