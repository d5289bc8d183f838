//! Multiple-answer question generation from the owner's secret seed.
//!
//! Offsets are drawn from the seeded stream described in [`crate::rng`]
//! (domain `"offsets"`) by rejection from `[1, 10^6]`, keeping the open
//! solution intervals `(a, a+n+1)` pairwise disjoint. Questions are assigned
//! templates round-robin and rendered in canonical ASCII with no whitespace
//! variation, since the model's key encoder hashes the exact text.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::CapacityParams;
use crate::error::{Error, Result};
use crate::rng;

/// Largest offset the generator draws.
pub const MAX_OFFSET: i64 = 1_000_000;

const MAX_DRAWS_PER_OFFSET: usize = 10_000;

/// The owner's secret.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SeedKey(pub u64);

/// How the question sentence wraps the inequality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    /// `For the inequality <ineq>, <m> random integer solutions are <v>=`
    Leading,
    /// `<m> random integer solutions for the inequality <ineq> are <v>=`
    Trailing,
}

/// Inequalities whose integer solution set is exactly `{a+1, ..., a+n}`
/// with `a' = a+n+1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inequality {
    /// `(x-a)(x-a')<0`
    Product,
    /// `log(y-a)+log(a'-y)>=0`
    LogSum,
    /// `1/(z-a)+1/(a'-z)>0`
    ReciprocalSum,
    /// `a<k<a'`
    Chain,
    /// `1/a'<1/x<1/a`, valid for `a > 0`
    ReciprocalChain,
    /// `a+1<=x<=a'-1`, written with the bounds already shifted
    ShiftedChain,
}

impl Inequality {
    fn render(self, var: char, a: i64, a_prime: i64) -> String {
        match self {
            Inequality::Product => format!("({var}-{a})({var}-{a_prime})<0"),
            Inequality::LogSum => format!("log({var}-{a})+log({a_prime}-{var})>=0"),
            Inequality::ReciprocalSum => format!("1/({var}-{a})+1/({a_prime}-{var})>0"),
            Inequality::Chain => format!("{a}<{var}<{a_prime}"),
            Inequality::ReciprocalChain => format!("1/{a_prime}<1/{var}<1/{a}"),
            Inequality::ShiftedChain => format!("{}<={var}<={}", a + 1, a_prime - 1),
        }
    }

    /// Evaluates the inequality at `x`; points outside the expression's
    /// domain (zero denominators, non-positive log arguments) do not satisfy it.
    pub fn holds(self, x: f64, a: f64, a_prime: f64) -> bool {
        match self {
            Inequality::Product => (x - a) * (x - a_prime) < 0.0,
            Inequality::LogSum => {
                x - a > 0.0 && a_prime - x > 0.0 && (x - a).ln() + (a_prime - x).ln() >= 0.0
            }
            Inequality::ReciprocalSum => {
                x != a && x != a_prime && 1.0 / (x - a) + 1.0 / (a_prime - x) > 0.0
            }
            Inequality::Chain => a < x && x < a_prime,
            Inequality::ReciprocalChain => {
                x != 0.0 && a != 0.0 && 1.0 / a_prime < 1.0 / x && 1.0 / x < 1.0 / a
            }
            Inequality::ShiftedChain => a + 1.0 <= x && x <= a_prime - 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuestionTemplate {
    pub id: u32,
    pub frame: Frame,
    pub inequality: Inequality,
    pub var: char,
}

impl QuestionTemplate {
    pub const fn new(id: u32, frame: Frame, inequality: Inequality, var: char) -> Self {
        Self { id, frame, inequality, var }
    }

    /// Renders the question for offset `a`, interval width `n` and `m` answers.
    pub fn render(&self, a: i64, n: u32, m: u32) -> String {
        let a_prime = a + i64::from(n) + 1;
        let ineq = self.inequality.render(self.var, a, a_prime);
        let v = self.var;
        match self.frame {
            Frame::Leading => format!("For the inequality {ineq}, {m} random integer solutions are {v}="),
            Frame::Trailing => format!("{m} random integer solutions for the inequality {ineq} are {v}="),
        }
    }

    /// Whether integer `x` solves the rendered inequality.
    pub fn is_solution(&self, x: i64, a: i64, n: u32) -> bool {
        let a_prime = a + i64::from(n) + 1;
        self.inequality.holds(x as f64, a as f64, a_prime as f64)
    }
}

impl fmt::Display for QuestionTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.id)
    }
}

const BUILTIN: [QuestionTemplate; 4] = [
    QuestionTemplate::new(1, Frame::Leading, Inequality::Product, 'x'),
    QuestionTemplate::new(2, Frame::Leading, Inequality::LogSum, 'y'),
    QuestionTemplate::new(3, Frame::Leading, Inequality::ReciprocalSum, 'z'),
    QuestionTemplate::new(4, Frame::Leading, Inequality::Chain, 'k'),
];

/// The four owner templates T1..T4.
pub fn builtin_templates() -> Vec<QuestionTemplate> {
    BUILTIN.to_vec()
}

/// Looks up any template this crate knows (owner or attacker) by id.
pub fn template_by_id(id: u32) -> Option<QuestionTemplate> {
    BUILTIN
        .iter()
        .chain(crate::attacks::OVERWRITE_TEMPLATES_A.iter())
        .chain(crate::attacks::OVERWRITE_TEMPLATES_B.iter())
        .find(|t| t.id == id)
        .copied()
}

/// One rendered multiple-answer question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionSpec {
    /// 1-based position in the question set.
    pub index: usize,
    pub template_id: u32,
    pub a: i64,
    pub n: u32,
    pub m: u32,
    pub prompt: String,
}

/// Draws `u` offsets in `[1, 10^6]` with pairwise disjoint solution intervals.
pub fn derive_sequence(key: SeedKey, u: usize, n: u32) -> Result<Vec<i64>> {
    derive_sequence_in(key, "offsets", u, n)
}

pub(crate) fn derive_sequence_in(key: SeedKey, domain: &str, u: usize, n: u32) -> Result<Vec<i64>> {
    if u == 0 {
        return Err(Error::Param("question count must be at least 1".into()));
    }
    let gap = i64::from(n) + 1;
    let mut rng = rng::stream(key.0, domain, u64::from(n));
    let mut offsets: Vec<i64> = Vec::with_capacity(u);
    while offsets.len() < u {
        let mut placed = false;
        for _ in 0..MAX_DRAWS_PER_OFFSET {
            let a = rng.random_range(1..=MAX_OFFSET);
            if offsets.iter().all(|&b| (a - b).abs() >= gap) {
                offsets.push(a);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "cannot place {u} disjoint intervals of width {n} in [1, {MAX_OFFSET}]"
            )));
        }
    }
    Ok(offsets)
}

/// Builds the full question set for `key`.
pub fn render_questions(
    key: SeedKey,
    params: &CapacityParams,
    u: usize,
    templates: &[QuestionTemplate],
) -> Result<Vec<QuestionSpec>> {
    render_from_offsets(&derive_sequence(key, u, params.n())?, params, templates)
}

pub(crate) fn render_from_offsets(
    offsets: &[i64],
    params: &CapacityParams,
    templates: &[QuestionTemplate],
) -> Result<Vec<QuestionSpec>> {
    if templates.is_empty() {
        return Err(Error::Config("template list is empty".into()));
    }
    Ok(offsets
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let t = &templates[i % templates.len()];
            QuestionSpec {
                index: i + 1,
                template_id: t.id,
                a,
                n: params.n(),
                m: params.m(),
                prompt: t.render(a, params.n(), params.m()),
            }
        })
        .collect())
}

/// Question set as a pretty-printed JSON array for audit.
pub fn questions_to_json(questions: &[QuestionSpec]) -> Result<String> {
    Ok(serde_json::to_string_pretty(questions)?)
}
