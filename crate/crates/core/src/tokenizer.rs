//! Lowercasing word tokenizer with a closed vocabulary and hashed buckets for
//! out-of-vocabulary words.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
const NUM_SPECIAL: u32 = 3;

fn word_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\w+|[^\w\s]").expect("valid regex"))
}

/// Lowercased words and single punctuation marks, in order.
pub fn split_words(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    word_regex()
        .find_iter(&lower)
        .map(|m| m.as_str().to_owned())
        .collect()
}

/// 64-bit FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    hash_buckets: u32,
    #[serde(skip)]
    lookup: HashMap<String, u32>,
}

impl Tokenizer {
    /// Builds a vocabulary from `texts`, keeping words seen at least
    /// `min_count` times, most frequent first, capped at `max_words`.
    /// Ties in frequency are broken alphabetically.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        min_count: usize,
        max_words: usize,
        hash_buckets: u32,
    ) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in split_words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_words);
        Self::from_words(ranked.into_iter().map(|(w, _)| w).collect(), hash_buckets)
    }

    pub fn from_words(words: Vec<String>, hash_buckets: u32) -> Self {
        let mut t = Self {
            words,
            hash_buckets: hash_buckets.max(1),
            lookup: HashMap::new(),
        };
        t.reindex();
        t
    }

    /// Restores the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.lookup = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32 + NUM_SPECIAL))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        NUM_SPECIAL as usize + self.words.len() + self.hash_buckets as usize
    }

    pub fn word_id(&self, word: &str) -> u32 {
        match self.lookup.get(word) {
            Some(&id) => id,
            None => {
                let base = NUM_SPECIAL + self.words.len() as u32;
                base + (fnv1a(word.as_bytes()) % u64::from(self.hash_buckets)) as u32
            }
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text).iter().map(|w| self.word_id(w)).collect()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn hash_buckets(&self) -> u32 {
        self.hash_buckets
    }
}
