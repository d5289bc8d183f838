//! Signed feature hashing of prompt text into a unit-norm key.
//!
//! The text is lowercased and split into runs of letters, runs of digits, and
//! single punctuation characters. Every token unigram, bigram and trigram is
//! hashed with `SHA-256(seed_le || feature)`; the first eight digest bytes
//! pick the bucket and the ninth byte's low bit the sign.

use nalgebra::DVector;
use sha2::{Digest, Sha256};

fn tokenize(text: &str) -> Vec<String> {
    #[derive(PartialEq, Clone, Copy)]
    enum Class {
        Alpha,
        Digit,
    }
    let mut tokens = Vec::new();
    let mut cur = String::new();
    let mut class: Option<Class> = None;
    for c in text.chars().flat_map(char::to_lowercase) {
        let cls = if c.is_alphabetic() {
            Some(Class::Alpha)
        } else if c.is_ascii_digit() {
            Some(Class::Digit)
        } else {
            None
        };
        if (cls.is_none() || cls != class) && !cur.is_empty() {
            tokens.push(std::mem::take(&mut cur));
        }
        match cls {
            Some(_) => cur.push(c),
            None if !c.is_whitespace() => tokens.push(c.to_string()),
            None => {}
        }
        class = cls;
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

fn features(tokens: &[String]) -> impl Iterator<Item = String> + '_ {
    let uni = tokens.iter().map(|t| format!("1\u{1f}{t}"));
    let bi = tokens.windows(2).map(|w| format!("2\u{1f}{}\u{1f}{}", w[0], w[1]));
    let tri = tokens
        .windows(3)
        .map(|w| format!("3\u{1f}{}\u{1f}{}\u{1f}{}", w[0], w[1], w[2]));
    uni.chain(bi).chain(tri)
}

/// Unit-norm `dim`-dimensional key for `text`. Text without any token maps
/// to the hashed empty feature, so the result is always unit-norm.
pub fn encode_key(text: &str, seed: u64, dim: usize) -> DVector<f64> {
    let tokens = tokenize(text);
    let mut v = DVector::<f64>::zeros(dim);
    let add = |v: &mut DVector<f64>, feature: &str| {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(feature.as_bytes());
        let d = h.finalize();
        let bucket = u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) % dim as u64;
        let sign = if d[8] & 1 == 0 { 1.0 } else { -1.0 };
        v[bucket as usize] += sign;
    };
    let mut any = false;
    for f in features(&tokens) {
        add(&mut v, &f);
        any = true;
    }
    if !any || v.norm() == 0.0 {
        add(&mut v, "\u{1f}empty");
    }
    let norm = v.norm();
    v / norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn tokenizer_splits_math() {
        assert_eq!(
            tokenize("For (x-10)(x-100)<0, 5"),
            ["for", "(", "x", "-", "10", ")", "(", "x", "-", "100", ")", "<", "0", ",", "5"]
        );
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let a = encode_key("For the inequality 10<k<100", 3, 128);
        let b = encode_key("For the inequality 10<k<100", 3, 128);
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-9);
        assert!((encode_key("", 3, 128).norm() - 1.0).abs() < 1e-9);
        assert_ne!(a, encode_key("For the inequality 10<k<100", 4, 128));
    }

    #[test]
    fn random_prompts_are_nearly_orthogonal() {
        let mut rng = crate::rng::stream(1, "test-prompts", 0);
        let mut prompts = std::collections::BTreeSet::new();
        while prompts.len() < 1000 {
            let words: Vec<String> = (0..rng.random_range(6..14))
                .map(|_| (0..rng.random_range(3..9)).map(|_| rng.random_range(b'a'..=b'z') as char).collect())
                .collect();
            prompts.insert(words.join(" "));
        }
        let keys: Vec<_> = prompts.iter().map(|p| encode_key(p, 42, 128)).collect();
        let mut worst: f64 = 0.0;
        for i in 0..keys.len() {
            for j in i + 1..keys.len() {
                worst = worst.max(keys[i].dot(&keys[j]).abs());
            }
        }
        assert!(worst < 0.5, "max |cos| = {worst}");
    }
}
