//! Hashed unigram + bigram features.
//!
//! Tokens are maximal runs of alphanumeric characters, lowercased. Each
//! unigram `a` is hashed as the bytes `"1\x1f" a`, each bigram `a b` as
//! `"2\x1f" a "\x1f" b`, with 64-bit FNV-1a; the feature index is the hash
//! modulo the dimension. Colliding features accumulate.

use serde::{Deserialize, Serialize};

use crate::seed::fnv1a64;

/// Bumped whenever tokenization or hashing changes.
pub const HASH_VERSION: u32 = 1;

pub const DEFAULT_DIM: usize = 1 << 18;

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Sparse feature vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    dim: usize,
    entries: Vec<(u32, f64)>,
}

impl FeatureVector {
    /// Build from arbitrary (index, weight) pairs; duplicates are summed.
    pub fn from_pairs(dim: usize, mut pairs: Vec<(u32, f64)>) -> Self {
        assert!(
            pairs.iter().all(|&(i, w)| (i as usize) < dim && w.is_finite()),
            "feature index out of range or non-finite weight"
        );
        pairs.sort_by_key(|&(i, _)| i);
        let mut entries: Vec<(u32, f64)> = Vec::with_capacity(pairs.len());
        for (i, w) in pairs {
            match entries.last_mut() {
                Some((j, acc)) if *j == i => *acc += w,
                _ => entries.push((i, w)),
            }
        }
        Self { dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: u32) -> f64 {
        self.entries
            .binary_search_by_key(&index, |&(i, _)| i)
            .map(|k| self.entries[k].1)
            .unwrap_or(0.0)
    }

    pub fn dot(&self, other: &FeatureVector) -> f64 {
        let (mut a, mut b) = (self.entries.iter().peekable(), other.entries.iter().peekable());
        let mut sum = 0.0;
        while let (Some(&&(i, x)), Some(&&(j, y))) = (a.peek(), b.peek()) {
            match i.cmp(&j) {
                std::cmp::Ordering::Less => {
                    a.next();
                }
                std::cmp::Ordering::Greater => {
                    b.next();
                }
                std::cmp::Ordering::Equal => {
                    sum += x * y;
                    a.next();
                    b.next();
                }
            }
        }
        sum
    }

    pub fn squared_norm(&self) -> f64 {
        self.entries.iter().map(|&(_, w)| w * w).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Featurizer {
    pub dim: usize,
}

impl Default for Featurizer {
    fn default() -> Self {
        Self { dim: DEFAULT_DIM }
    }
}

impl Featurizer {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0 && dim <= u32::MAX as usize, "feature dimension out of range");
        Self { dim }
    }

    fn index(&self, bytes: &[u8]) -> u32 {
        (fnv1a64(bytes) % self.dim as u64) as u32
    }

    pub fn unigram_index(&self, token: &str) -> u32 {
        let mut key = b"1\x1f".to_vec();
        key.extend_from_slice(token.as_bytes());
        self.index(&key)
    }

    pub fn bigram_index(&self, first: &str, second: &str) -> u32 {
        let mut key = b"2\x1f".to_vec();
        key.extend_from_slice(first.as_bytes());
        key.push(0x1f);
        key.extend_from_slice(second.as_bytes());
        self.index(&key)
    }

    pub fn featurize(&self, text: &str) -> FeatureVector {
        let tokens = tokenize(text);
        let mut pairs = Vec::with_capacity(tokens.len() * 2);
        for t in &tokens {
            pairs.push((self.unigram_index(t), 1.0));
        }
        for w in tokens.windows(2) {
            pairs.push((self.bigram_index(&w[0], &w[1]), 1.0));
        }
        FeatureVector::from_pairs(self.dim, pairs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_lowercases_and_splits_punctuation() {
        assert_eq!(tokenize("Great day!! Isn't it?"), ["great", "day", "isn", "t", "it"]);
        assert!(tokenize("?!  ...").is_empty());
    }

    #[test]
    fn deterministic() {
        let f = Featurizer::default();
        assert_eq!(f.featurize("The market rallied"), f.featurize("The market rallied"));
    }

    #[test]
    fn repeated_unigram_counts() {
        let f = Featurizer::default();
        let v = f.featurize("good good");
        assert_eq!(v.get(f.unigram_index("good")), 2.0);
        assert_eq!(v.get(f.bigram_index("good", "good")), 1.0);
        assert_eq!(v.entries().len(), 2);
    }

    #[test]
    fn empty_after_tokenization() {
        assert!(Featurizer::default().featurize("...").is_empty());
    }

    #[test]
    fn disjoint_vocabularies_are_orthogonal() {
        let f = Featurizer::default();
        let a = f.featurize("profits surged strongly beating forecasts");
        let b = f.featurize("shares plunged after weak guidance");
        assert_eq!(a.dot(&b), 0.0);
        assert!(a.dot(&a) > 0.0);
    }

    #[test]
    fn collisions_accumulate() {
        let v = FeatureVector::from_pairs(4, vec![(3, 1.0), (1, 2.0), (3, 0.5)]);
        assert_eq!(v.entries(), &[(1, 2.0), (3, 1.5)]);
    }
}
