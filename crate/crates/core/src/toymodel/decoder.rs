//! Block decoder from value vectors to answer integers.
//!
//! A value vector is laid out as `m_max` answer slots; each slot holds one
//! sub-block per decimal digit of a fixed-width, zero-padded integer. Each
//! (slot, digit) pair owns a 10-row codebook of unit vectors, and the digit
//! emitted is the argmax of `sub_block . codeword` (lowest index on ties).
//! Treating the digits of one slot as a single token, a slot's vocabulary has
//! `10^digits` entries.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng;

pub const RADIX: usize = 10;

const MAX_CODEBOOK_DRAWS: u64 = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    m_max: usize,
    digits: usize,
    digit_dim: usize,
    /// `m_max * digits` matrices of shape `RADIX x digit_dim`, slot-major.
    entries: Vec<DMatrix<f64>>,
}

impl Codebook {
    /// Draws a codebook whose per-position codewords have pairwise cosine at
    /// most `1 - min_margin`, redrawing a position until it does.
    pub fn generate(seed: u64, m_max: usize, digits: usize, digit_dim: usize, min_margin: f64) -> Result<Self> {
        let mut entries = Vec::with_capacity(m_max * digits);
        for pos in 0..(m_max * digits) as u64 {
            let mut accepted = None;
            for attempt in 0..MAX_CODEBOOK_DRAWS {
                let mut rng = rng::stream(seed, "codebook", pos * MAX_CODEBOOK_DRAWS + attempt);
                let mut e = DMatrix::from_fn(RADIX, digit_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
                for mut row in e.row_iter_mut() {
                    let n = row.norm();
                    row /= n;
                }
                if 1.0 - max_cosine(&e) > min_margin {
                    accepted = Some(e);
                    break;
                }
            }
            entries.push(accepted.ok_or_else(|| {
                Error::Init(format!("no codebook with margin {min_margin} in {digit_dim} dimensions"))
            })?);
        }
        Ok(Self { m_max, digits, digit_dim, entries })
    }

    pub fn m_max(&self) -> usize {
        self.m_max
    }

    pub fn digits(&self) -> usize {
        self.digits
    }

    pub fn block_dim(&self) -> usize {
        self.digits * self.digit_dim
    }

    pub fn value_dim(&self) -> usize {
        self.m_max * self.block_dim()
    }

    /// Exclusive upper bound of representable integers, `10^digits`.
    pub fn max_value(&self) -> i64 {
        (RADIX as i64).pow(self.digits as u32)
    }

    /// Codewords of one (slot, digit) position.
    pub fn position(&self, slot: usize, digit: usize) -> &DMatrix<f64> {
        &self.entries[slot * self.digits + digit]
    }

    /// Smallest `1 - cos` over all codeword pairs at any position.
    pub fn min_margin(&self) -> f64 {
        self.entries.iter().map(|e| 1.0 - max_cosine(e)).fold(f64::INFINITY, f64::min)
    }

    fn offset(&self, slot: usize, digit: usize) -> usize {
        (slot * self.digits + digit) * self.digit_dim
    }

    fn digits_of(&self, value: i64) -> Result<Vec<usize>> {
        if value < 0 || value >= self.max_value() {
            return Err(Error::Range(format!(
                "{value} is not representable with {} digits",
                self.digits
            )));
        }
        let mut out = vec![0; self.digits];
        let mut rest = value;
        for d in (0..self.digits).rev() {
            out[d] = (rest % RADIX as i64) as usize;
            rest /= RADIX as i64;
        }
        Ok(out)
    }

    fn check_len(&self, m: usize) -> Result<()> {
        if m > self.m_max {
            return Err(Error::Param(format!("answer length {m} exceeds m_max={}", self.m_max)));
        }
        Ok(())
    }

    /// Value vector that stores `answer`: codeword `scale * e[digit]` in every
    /// used sub-block, zeros in unused slots.
    pub fn value_code(&self, answer: &[i64], scale: f64) -> Result<DVector<f64>> {
        self.check_len(answer.len())?;
        let mut v = DVector::zeros(self.value_dim());
        for (slot, &value) in answer.iter().enumerate() {
            for (digit, d) in self.digits_of(value)?.into_iter().enumerate() {
                let off = self.offset(slot, digit);
                let word = self.position(slot, digit).row(d);
                for k in 0..self.digit_dim {
                    v[off + k] = scale * word[k];
                }
            }
        }
        Ok(v)
    }

    fn logits(&self, v: &DVector<f64>, slot: usize, digit: usize) -> DVector<f64> {
        let sub = v.rows(self.offset(slot, digit), self.digit_dim);
        self.position(slot, digit) * sub
    }

    /// Greedy readout of the first `m` slots of `v`.
    pub fn decode_answer(&self, v: &DVector<f64>, m: usize) -> Result<Vec<i64>> {
        self.check_len(m)?;
        self.check_dim(v)?;
        Ok((0..m)
            .map(|slot| {
                (0..self.digits).fold(0i64, |acc, digit| {
                    let logits = self.logits(v, slot, digit);
                    let mut best = 0;
                    for (i, &l) in logits.iter().enumerate() {
                        if l > logits[best] {
                            best = i;
                        }
                    }
                    acc * RADIX as i64 + best as i64
                })
            })
            .collect())
    }

    /// Summed softmax cross-entropy of `target` under the block logits of `v`,
    /// with its gradient with respect to `v`.
    pub fn answer_loss_and_gradient(&self, v: &DVector<f64>, target: &[i64]) -> Result<(f64, DVector<f64>)> {
        self.check_len(target.len())?;
        self.check_dim(v)?;
        let mut loss = 0.0;
        let mut grad = DVector::zeros(self.value_dim());
        for (slot, &value) in target.iter().enumerate() {
            for (digit, want) in self.digits_of(value)?.into_iter().enumerate() {
                let logits = self.logits(v, slot, digit);
                let max = logits.max();
                let exp = logits.map(|l| (l - max).exp());
                let z = exp.sum();
                loss += z.ln() + max - logits[want];
                let mut resid = exp / z;
                resid[want] -= 1.0;
                let g = self.position(slot, digit).tr_mul(&resid);
                grad.rows_mut(self.offset(slot, digit), self.digit_dim).copy_from(&g);
            }
        }
        Ok((loss, grad))
    }

    fn check_dim(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.value_dim() {
            return Err(Error::Param(format!(
                "value vector has {} entries, decoder expects {}",
                v.len(),
                self.value_dim()
            )));
        }
        Ok(())
    }
}

fn max_cosine(e: &DMatrix<f64>) -> f64 {
    let gram = e * e.transpose();
    let mut worst = f64::NEG_INFINITY;
    for i in 0..gram.nrows() {
        for j in i + 1..gram.ncols() {
            worst = worst.max(gram[(i, j)]);
        }
    }
    worst
}
