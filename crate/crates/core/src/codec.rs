//! Watermark chunks <-> ordered answer selections.
//!
//! A chunk integer `I < n!/(n-m)!` is mapped to an ordered selection of `m`
//! distinct integers from the candidate vector `(a+1, ..., a+n)` by
//! lexicographic unranking in the falling-factorial number system, and mapped
//! back by ranking. Positions inside the shrinking candidate vector are
//! 0-based, so rank 0 is the lexicographically first selection.
//!
//! All factorial arithmetic is exact ([`BigUint`]); no floating point is used
//! to derive capacities.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Solution-interval width `n`, answers per question `m`, and the number of
/// watermark bits `beta` one question carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CapacityParams {
    n: u32,
    m: u32,
    beta: u32,
}

impl CapacityParams {
    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    pub fn beta(&self) -> u32 {
        self.beta
    }

    /// Number of ordered `m`-selections out of `n` candidates.
    pub fn falling_factorial(&self) -> BigUint {
        falling_factorial(self.n, self.m)
    }

    /// Number of questions needed to carry `bits` watermark bits.
    pub fn questions_for(&self, bits: usize) -> Result<usize> {
        if self.beta == 0 {
            return Err(Error::Param(format!(
                "(n={}, m={}) carries zero bits per question",
                self.n, self.m
            )));
        }
        Ok(bits.div_ceil(self.beta as usize))
    }
}

/// `n * (n-1) * ... * (n-k+1)`, i.e. `n!/(n-k)!`. Empty product is 1.
fn falling_factorial(n: u32, k: u32) -> BigUint {
    (n - k + 1..=n).fold(BigUint::one(), |acc, f| acc * f)
}

/// Computes the per-question capacity `beta = floor(log2(n!/(n-m)!))`.
pub fn capacity(n: u32, m: u32) -> Result<CapacityParams> {
    if n == 0 || m == 0 {
        return Err(Error::Param(format!("n and m must be positive (n={n}, m={m})")));
    }
    if m > n {
        return Err(Error::Param(format!("m={m} exceeds n={n}")));
    }
    // floor(log2 x) for x >= 1 is bit_length(x) - 1.
    let bits = falling_factorial(n, m).bits();
    let beta = u32::try_from(bits - 1)
        .map_err(|_| Error::Param(format!("capacity of (n={n}, m={m}) does not fit in u32")))?;
    Ok(CapacityParams { n, m, beta })
}

/// Place values `(n-i)!/(n-m)!` for `i = 1..=m`, most significant first.
fn place_values(params: &CapacityParams) -> Vec<BigUint> {
    let (n, m) = (params.n, params.m);
    let mut radices = vec![BigUint::one(); m as usize];
    for i in (0..m as usize - 1).rev() {
        // radix_i = radix_{i+1} * (n - (i+1)) with 0-based i
        radices[i] = &radices[i + 1] * (n - i as u32 - 1);
    }
    radices
}

/// An ordered selection of `m` distinct integers from the open interval
/// `(a, a+n+1)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnswerPermutation {
    values: Vec<i64>,
    base_offset: i64,
}

impl AnswerPermutation {
    /// Validates `values` against the interval and distinctness constraints.
    pub fn new(values: Vec<i64>, a: i64, params: &CapacityParams) -> Result<Self> {
        validate_answer(&values, a, params)?;
        Ok(Self { values, base_offset: a })
    }

    pub fn values(&self) -> &[i64] {
        &self.values
    }

    pub fn base_offset(&self) -> i64 {
        self.base_offset
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Comma-separated rendering as the model would print it.
    pub fn render(&self) -> String {
        self.values.iter().map(i64::to_string).collect::<Vec<_>>().join(",")
    }
}

impl AsRef<[i64]> for AnswerPermutation {
    fn as_ref(&self) -> &[i64] {
        &self.values
    }
}

fn validate_answer(values: &[i64], a: i64, params: &CapacityParams) -> Result<()> {
    if values.len() != params.m as usize {
        return Err(Error::MalformedAnswer(format!(
            "expected {} values, got {}",
            params.m,
            values.len()
        )));
    }
    let hi = a + i64::from(params.n);
    for (i, &v) in values.iter().enumerate() {
        if v <= a || v > hi {
            return Err(Error::MalformedAnswer(format!("{v} is outside ({a}, {})", hi + 1)));
        }
        if values[..i].contains(&v) {
            return Err(Error::MalformedAnswer(format!("{v} appears more than once")));
        }
    }
    Ok(())
}

/// Unranks `chunk` into the lexicographically `chunk`-th ordered selection of
/// `m` values from `(a+1, ..., a+n)`.
pub fn encode(chunk: &BigUint, a: i64, params: &CapacityParams) -> Result<AnswerPermutation> {
    let total = params.falling_factorial();
    if *chunk >= total {
        return Err(Error::Range(format!(
            "chunk {chunk} is not below n!/(n-m)! = {total}"
        )));
    }
    let mut candidates: Vec<i64> = (1..=i64::from(params.n)).map(|d| a + d).collect();
    let mut rest = chunk.clone();
    let mut values = Vec::with_capacity(params.m as usize);
    for radix in place_values(params) {
        let pos = (&rest / &radix)
            .to_usize()
            .expect("position is bounded by the candidate count");
        rest %= &radix;
        values.push(candidates.remove(pos));
    }
    debug_assert!(rest.is_zero());
    Ok(AnswerPermutation { values, base_offset: a })
}

/// Ranks an ordered selection back to its chunk integer. Values outside the
/// interval, duplicates, or a wrong count yield [`Error::MalformedAnswer`].
pub fn decode(answer: &[i64], a: i64, params: &CapacityParams) -> Result<BigUint> {
    validate_answer(answer, a, params)?;
    let mut candidates: Vec<i64> = (1..=i64::from(params.n)).map(|d| a + d).collect();
    let mut rank = BigUint::zero();
    for (&v, radix) in answer.iter().zip(place_values(params)) {
        let pos = candidates
            .iter()
            .position(|&c| c == v)
            .expect("validated value is still a candidate");
        candidates.remove(pos);
        rank += radix * pos;
    }
    Ok(rank)
}

/// A watermark cut into `beta`-bit big-endian chunks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatermarkMessage {
    pub bits: Vec<bool>,
    pub beta: u32,
    pub chunks: Vec<BigUint>,
    pub original_length: usize,
}

/// Splits `bits` into `ceil(N/beta)` chunks; the tail chunk is padded on the
/// right with zeros.
pub fn split_watermark(bits: &[bool], params: &CapacityParams) -> Result<WatermarkMessage> {
    if bits.is_empty() {
        return Err(Error::Param("watermark is empty".into()));
    }
    let beta = params.beta as usize;
    let u = params.questions_for(bits.len())?;
    let chunks = (0..u)
        .map(|i| {
            (0..beta).fold(BigUint::zero(), |acc, j| {
                let bit = bits.get(i * beta + j).copied().unwrap_or(false);
                (acc << 1u32) + u32::from(bit)
            })
        })
        .collect();
    Ok(WatermarkMessage {
        bits: bits.to_vec(),
        beta: params.beta,
        chunks,
        original_length: bits.len(),
    })
}

/// Concatenates big-endian `beta`-bit chunks and truncates to `original_length`.
pub fn join_watermark(chunks: &[BigUint], beta: u32, original_length: usize) -> Result<Vec<bool>> {
    let mut bits = Vec::with_capacity(chunks.len() * beta as usize);
    for chunk in chunks {
        if chunk.bits() > u64::from(beta) {
            return Err(Error::Range(format!("chunk {chunk} does not fit in {beta} bits")));
        }
        bits.extend((0..u64::from(beta)).rev().map(|j| chunk.bit(j)));
    }
    if bits.len() < original_length {
        return Err(Error::Param(format!(
            "{} chunks of {beta} bits cannot hold {original_length} bits",
            chunks.len()
        )));
    }
    bits.truncate(original_length);
    Ok(bits)
}

/// Parses a hex string (most-significant nibble first) into bits.
pub fn bits_from_hex(hex: &str) -> Result<Vec<bool>> {
    let hex = hex.trim();
    let hex = hex.strip_prefix("0x").unwrap_or(hex);
    if hex.is_empty() {
        return Err(Error::Param("empty hex watermark".into()));
    }
    let mut bits = Vec::with_capacity(hex.len() * 4);
    for c in hex.chars() {
        let nibble = c
            .to_digit(16)
            .ok_or_else(|| Error::Parse(format!("invalid hex digit {c:?}")))?;
        bits.extend((0..4).rev().map(|j| nibble >> j & 1 == 1));
    }
    Ok(bits)
}

/// Renders bits as lowercase hex, most-significant nibble first. A length
/// that is not a multiple of 4 is padded on the right with zeros.
pub fn bits_to_hex(bits: &[bool]) -> String {
    bits.chunks(4)
        .map(|nib| {
            let v = (0..4).fold(0u32, |acc, j| acc << 1 | u32::from(nib.get(j).copied().unwrap_or(false)));
            char::from_digit(v, 16).expect("nibble < 16")
        })
        .collect()
}
