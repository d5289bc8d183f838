//! Multi-bit watermarking of a toy associative-memory model by
//! null-space-projected weight editing.
//!
//! A secret seed selects inequality questions with many valid integer
//! answers. Each question's chosen answer ordering carries a chunk of the
//! watermark; the editor writes those answers into the model's single
//! editable matrix without disturbing the facts it already stores.
//!
//! ```no_run
//! use nullmark_core::{capacity, embed_watermark, extract, init_model, builtin_templates};
//! use nullmark_core::{EditConfig, ModelConfig, SeedKey};
//!
//! let model = init_model(&ModelConfig::default())?;
//! let params = capacity(89, 5)?;
//! let bits = nullmark_core::random_watermark(7, 128);
//! let marked = embed_watermark(&model, SeedKey(7), &bits, &params, &builtin_templates(), &EditConfig::default())?;
//! let got = extract(&marked.model, SeedKey(7), &params, 128, &builtin_templates(), Some(&bits))?;
//! assert_eq!(got.esr(), Some(1.0));
//! # Ok::<(), nullmark_core::Error>(())
//! ```

// `!(x > 0.0)` style checks are deliberate: they reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod codec;
pub mod editor;
pub mod error;
pub mod eval;
pub mod generator;
pub mod rng;
pub mod toymodel;

pub use attacks::{AttackSpec, Scenario};
pub use codec::{
    bits_from_hex, bits_to_hex, capacity, decode, encode, join_watermark, split_watermark, AnswerPermutation,
    CapacityParams, WatermarkMessage,
};
pub use editor::{embed, EditConfig, EditTrace, RoundRecord, StabilizationMode};
pub use error::{Error, Result};
pub use eval::{embed_watermark, extract, measure, random_watermark, Embedding, ExtractionResult, Metrics};
pub use generator::{builtin_templates, render_questions, QuestionSpec, QuestionTemplate, SeedKey};
pub use toymodel::{generate, init_model, load_model, save_model, ModelConfig, ModelState};
