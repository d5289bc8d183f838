//! Weight-space attacks on a watermarked model.
//!
//! Every attack takes the model by reference and returns a new one; the same
//! spec and seed always produce the same output.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::CapacityParams;
use crate::editor::{build_projector, embed_prompts, EditConfig, EditTrace};
use crate::error::{Error, Result};
use crate::eval::{embed_watermark, random_watermark, Embedding};
use crate::generator::{Frame, Inequality, QuestionTemplate, SeedKey};
use crate::rng;
use crate::toymodel::{synthetic_facts, ModelState};

/// Scenario A: the owner's sentence frame around rewritten inequalities.
pub const OVERWRITE_TEMPLATES_A: [QuestionTemplate; 2] = [
    QuestionTemplate::new(101, Frame::Leading, Inequality::ReciprocalChain, 'x'),
    QuestionTemplate::new(102, Frame::Leading, Inequality::ShiftedChain, 'x'),
];

/// Scenario B: the same inequalities in a differently phrased sentence.
pub const OVERWRITE_TEMPLATES_B: [QuestionTemplate; 2] = [
    QuestionTemplate::new(201, Frame::Trailing, Inequality::ReciprocalChain, 'x'),
    QuestionTemplate::new(202, Frame::Trailing, Inequality::ShiftedChain, 'x'),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    /// Attacker knows the question sentence but not the inequality.
    A,
    /// Attacker knows neither.
    B,
}

impl Scenario {
    pub fn templates(self) -> &'static [QuestionTemplate] {
        match self {
            Scenario::A => &OVERWRITE_TEMPLATES_A,
            Scenario::B => &OVERWRITE_TEMPLATES_B,
        }
    }
}

/// Fine-tuning data mix and optimiser settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Facts per step.
    pub batch: usize,
    /// Share of each batch drawn from fresh synthetic facts rather than the
    /// preserved ones.
    pub fresh_fraction: f64,
    /// Size of the fresh-fact pool.
    pub fresh_pool: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { steps: 0, lr: 1e-3, seed: 0, batch: 16, fresh_fraction: 0.5, fresh_pool: 64 }
    }
}

/// One attack with its intensity. Serialised with a `kind` tag, e.g.
/// `{"kind": "noise", "sigma": 0.01}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackSpec {
    None,
    Noise { sigma: f64 },
    Prune { ratio: f64 },
    Quantize { bits: u32 },
    Finetune {
        steps: usize,
        #[serde(default = "default_finetune_lr")]
        lr: f64,
    },
    Edit { cases: usize },
    Overwrite { scenario: Scenario },
}

fn default_finetune_lr() -> f64 {
    FinetuneConfig::default().lr
}

impl AttackSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            AttackSpec::None => "none",
            AttackSpec::Noise { .. } => "noise",
            AttackSpec::Prune { .. } => "prune",
            AttackSpec::Quantize { .. } => "quantize",
            AttackSpec::Finetune { .. } => "finetune",
            AttackSpec::Edit { .. } => "edit",
            AttackSpec::Overwrite { .. } => "overwrite",
        }
    }

    /// Scalar intensity for reports; scenario A/B map to 0/1.
    pub fn intensity(&self) -> f64 {
        match *self {
            AttackSpec::None => 0.0,
            AttackSpec::Noise { sigma } => sigma,
            AttackSpec::Prune { ratio } => ratio,
            AttackSpec::Quantize { bits } => f64::from(bits),
            AttackSpec::Finetune { steps, .. } => steps as f64,
            AttackSpec::Edit { cases } => cases as f64,
            AttackSpec::Overwrite { scenario } => match scenario {
                Scenario::A => 0.0,
                Scenario::B => 1.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Param(msg));
        match *self {
            AttackSpec::Noise { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                bad(format!("noise sigma {sigma} must be finite and non-negative"))
            }
            AttackSpec::Prune { ratio } if !(0.0..=1.0).contains(&ratio) => {
                bad(format!("prune ratio {ratio} outside [0, 1]"))
            }
            AttackSpec::Quantize { bits } if bits != 4 && bits != 8 => {
                bad(format!("quantisation to {bits} bits is not supported (use 4 or 8)"))
            }
            AttackSpec::Finetune { lr, .. } if !(lr > 0.0 && lr.is_finite()) => {
                bad(format!("fine-tune lr {lr} must be positive"))
            }
            AttackSpec::Edit { cases: 0 } => bad("edit attack needs at least one case".into()),
            _ => Ok(()),
        }
    }

    /// Applies the attack. `params` and `edit` are used by the editing-based
    /// attacks.
    pub fn apply(
        &self,
        model: &ModelState,
        seed: u64,
        params: &CapacityParams,
        edit: &EditConfig,
    ) -> Result<ModelState> {
        self.validate()?;
        match *self {
            AttackSpec::None => Ok(model.clone()),
            AttackSpec::Noise { sigma } => attack_noise(model, sigma, seed),
            AttackSpec::Prune { ratio } => attack_prune(model, ratio),
            AttackSpec::Quantize { bits } => attack_quantize(model, bits),
            AttackSpec::Finetune { steps, lr } => {
                attack_finetune_with(model, &FinetuneConfig { steps, lr, seed, ..FinetuneConfig::default() })
            }
            AttackSpec::Edit { cases } => attack_edit(model, cases, seed, edit).map(|(m, _)| m),
            AttackSpec::Overwrite { scenario } => {
                attack_overwrite(model, seed, scenario, params, edit).map(|o| o.embedding.model)
            }
        }
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every entry of `W`.
pub fn attack_noise(model: &ModelState, sigma: f64, seed: u64) -> Result<ModelState> {
    AttackSpec::Noise { sigma }.validate()?;
    if sigma == 0.0 {
        return Ok(model.clone());
    }
    let mut rng = rng::stream(seed, "attack-noise", 0);
    let w = model.w();
    let mut noisy = w.clone();
    // row-major draw order so the noise does not depend on storage layout
    for r in 0..w.nrows() {
        for c in 0..w.ncols() {
            noisy[(r, c)] += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(model.with_weights(noisy))
}

/// Zeroes the `floor(ratio * len)` entries of `W` with smallest magnitude;
/// ties go to the earlier row-major position.
pub fn attack_prune(model: &ModelState, ratio: f64) -> Result<ModelState> {
    AttackSpec::Prune { ratio }.validate()?;
    let w = model.w();
    let cols = w.ncols();
    let total = w.len();
    let count = ((ratio * total as f64).floor() as usize).min(total);
    let mut order: Vec<usize> = (0..total).collect();
    let at = |i: usize| w[(i / cols, i % cols)].abs();
    order.sort_by(|&x, &y| at(x).total_cmp(&at(y)).then(x.cmp(&y)));
    let mut pruned = w.clone();
    for &i in &order[..count] {
        pruned[(i / cols, i % cols)] = 0.0;
    }
    Ok(model.with_weights(pruned))
}

/// Symmetric per-tensor quantise/dequantise of `W` with round-half-to-even.
pub fn attack_quantize(model: &ModelState, bits: u32) -> Result<ModelState> {
    AttackSpec::Quantize { bits }.validate()?;
    Ok(model.with_weights(quantize_dequantize(model.w(), bits)))
}

pub(crate) fn quantize_dequantize(w: &DMatrix<f64>, bits: u32) -> DMatrix<f64> {
    let levels = f64::from((1u32 << (bits - 1)) - 1);
    let max = w.amax();
    if max == 0.0 {
        return w.clone();
    }
    let scale = max / levels;
    w.map(|x| (x / scale).round_ties_even().clamp(-levels, levels) * scale)
}

/// Gradient steps on `W` only, over batches mixing preserved facts with fresh
/// synthetic facts. Uses the default data mix.
pub fn attack_finetune(model: &ModelState, steps: usize, lr: f64, seed: u64) -> Result<ModelState> {
    attack_finetune_with(model, &FinetuneConfig { steps, lr, seed, ..FinetuneConfig::default() })
}

pub fn attack_finetune_with(model: &ModelState, cfg: &FinetuneConfig) -> Result<ModelState> {
    if cfg.steps == 0 {
        return Ok(model.clone());
    }
    if !(cfg.lr > 0.0) || cfg.batch == 0 || !(0.0..=1.0).contains(&cfg.fresh_fraction) {
        return Err(Error::Param("fine-tune needs lr > 0, batch > 0 and fresh_fraction in [0, 1]".into()));
    }
    let mc = model.config();
    let fresh = synthetic_facts(cfg.seed, "finetune-facts", cfg.fresh_pool.max(1), mc.m_max, model.codebook().max_value());
    let fresh_keys: Vec<_> = fresh.iter().map(|f| model.key(&f.prompt)).collect();
    let n_fresh = ((cfg.batch as f64) * cfg.fresh_fraction).round() as usize;
    let n_old = cfg.batch - n_fresh;
    let mut rng = rng::stream(cfg.seed, "finetune-batches", 0);
    let mut w = model.w().clone();
    for step in 0..cfg.steps {
        let mut grad = DMatrix::zeros(w.nrows(), w.ncols());
        let mut add = |key: nalgebra::DVectorView<f64>, answer: &[i64]| -> Result<()> {
            let h = &w * key;
            let (_, g) = model.answer_loss_and_gradient(&h, answer)?;
            grad.ger(1.0 / cfg.batch as f64, &g, &key, 1.0);
            Ok(())
        };
        for _ in 0..n_old {
            let i = rng.random_range(0..model.facts().len());
            add(model.k0().column(i), &model.facts()[i].answer)?;
        }
        for _ in 0..n_fresh {
            let i = rng.random_range(0..fresh.len());
            add(fresh_keys[i].as_view(), &fresh[i].answer)?;
        }
        w -= grad * cfg.lr;
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::Attack(format!("fine-tuning diverged at step {}", step + 1)));
        }
    }
    Ok(model.with_weights(w))
}

/// The injected facts of an edit attack.
#[derive(Debug, Clone)]
pub struct EditAttackOutcome {
    pub prompts: Vec<String>,
    pub answers: Vec<Vec<i64>>,
    pub trace: EditTrace,
}

/// Edits `case_count` fresh random facts into the same layer, using the true
/// preserved keys for the projector.
pub fn attack_edit(
    model: &ModelState,
    case_count: usize,
    seed: u64,
    config: &EditConfig,
) -> Result<(ModelState, EditAttackOutcome)> {
    AttackSpec::Edit { cases: case_count }.validate()?;
    let facts = synthetic_facts(seed, "edit-attack-facts", case_count, model.config().m_max, model.codebook().max_value());
    let prompts: Vec<String> = facts.iter().map(|f| f.prompt.clone()).collect();
    let answers: Vec<Vec<i64>> = facts.into_iter().map(|f| f.answer).collect();
    let projector = build_projector(model.k0(), config.svd_zero_tol)?;
    let config = EditConfig { noise_seed: seed, ..config.clone() };
    let (edited, trace) = embed_prompts(model, &prompts, &answers, &config, &projector)?;
    Ok((edited, EditAttackOutcome { prompts, answers, trace }))
}

/// Result of an overwrite attack, including the attacker's own watermark.
#[derive(Debug, Clone)]
pub struct OverwriteOutcome {
    pub scenario: Scenario,
    pub attacker_key: SeedKey,
    pub bits: Vec<bool>,
    pub embedding: Embedding,
}

/// Embeds an attacker watermark of the same length as the owner's default
/// (four questions' worth of bits) with the attacker's own seed and templates.
pub fn attack_overwrite(
    model: &ModelState,
    attacker_seed: u64,
    scenario: Scenario,
    params: &CapacityParams,
    config: &EditConfig,
) -> Result<OverwriteOutcome> {
    let key = SeedKey(attacker_seed);
    let bits = random_watermark(attacker_seed ^ 0xA77A_C4E5, 4 * params.beta() as usize);
    let config = EditConfig { noise_seed: attacker_seed, ..config.clone() };
    let embedding = embed_watermark(model, key, &bits, params, scenario.templates(), &config)?;
    Ok(OverwriteOutcome { scenario, attacker_key: key, bits, embedding })
}

/// Parses repeated `key=value` CLI pairs into an [`AttackSpec`].
pub fn parse_attack(kind: &str, args: &BTreeMap<String, String>) -> Result<AttackSpec> {
    let get = |k: &str| {
        args.get(k)
            .ok_or_else(|| Error::Param(format!("attack {kind} needs --{k}")))
    };
    let num = |k: &str| -> Result<f64> {
        get(k)?.parse().map_err(|_| Error::Param(format!("--{k} must be a number")))
    };
    let int = |k: &str| -> Result<u64> {
        get(k)?.parse().map_err(|_| Error::Param(format!("--{k} must be a non-negative integer")))
    };
    let spec = match kind {
        "none" => AttackSpec::None,
        "noise" => AttackSpec::Noise { sigma: num("sigma")? },
        "prune" => AttackSpec::Prune { ratio: num("ratio")? },
        "quantize" => AttackSpec::Quantize { bits: int("bits")? as u32 },
        "finetune" => AttackSpec::Finetune {
            steps: int("steps")? as usize,
            lr: if args.contains_key("lr") { num("lr")? } else { default_finetune_lr() },
        },
        "edit" => AttackSpec::Edit { cases: int("cases")? as usize },
        "overwrite" => AttackSpec::Overwrite {
            scenario: match get("scenario")?.as_str() {
                "A" | "a" => Scenario::A,
                "B" | "b" => Scenario::B,
                other => return Err(Error::Param(format!("unknown scenario {other:?}"))),
            },
        },
        other => return Err(Error::Param(format!("unknown attack kind {other:?}"))),
    };
    spec.validate()?;
    Ok(spec)
}
