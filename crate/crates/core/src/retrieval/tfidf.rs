//! Sparse TF-IDF vectors with an inverted index for exact cosine scoring.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TfidfConfig {
    /// `1 + ln(tf)` instead of raw counts.
    pub sublinear_tf: bool,
    /// Add adjacent-token bigrams to the unigram features.
    pub bigrams: bool,
}

impl Default for TfidfConfig {
    fn default() -> Self {
        Self {
            sublinear_tf: true,
            bigrams: true,
        }
    }
}

fn token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // Unicode word runs of length >= 2.
    RE.get_or_init(|| Regex::new(r"\b\w\w+\b").expect("valid regex"))
}

/// Lowercased unigram (and optionally bigram) terms of `text`.
pub fn analyze(text: &str, bigrams: bool) -> Vec<String> {
    let lower = text.to_lowercase();
    let unigrams: Vec<&str> = token_regex().find_iter(&lower).map(|m| m.as_str()).collect();
    let mut terms: Vec<String> = unigrams.iter().map(|s| (*s).to_owned()).collect();
    if bigrams {
        terms.extend(unigrams.windows(2).map(|w| format!("{} {}", w[0], w[1])));
    }
    terms
}

pub type SparseVec = Vec<(u32, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfModel {
    pub config: TfidfConfig,
    /// term -> column, columns assigned in sorted term order
    pub vocabulary: BTreeMap<String, u32>,
    pub idf: Vec<f64>,
    pub doc_vectors: Vec<SparseVec>,
    #[serde(skip)]
    postings: Vec<Vec<(u32, f64)>>,
}

impl TfidfModel {
    pub fn fit(texts: &[String], config: TfidfConfig) -> Self {
        let analyzed: Vec<Vec<String>> = texts.iter().map(|t| analyze(t, config.bigrams)).collect();
        let mut df: BTreeMap<&str, usize> = BTreeMap::new();
        for terms in &analyzed {
            let mut seen: Vec<&str> = terms.iter().map(String::as_str).collect();
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                *df.entry(t).or_default() += 1;
            }
        }
        let n = texts.len() as f64;
        let vocabulary: BTreeMap<String, u32> = df
            .keys()
            .enumerate()
            .map(|(i, t)| ((*t).to_owned(), i as u32))
            .collect();
        let idf: Vec<f64> = df
            .values()
            .map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0)
            .collect();
        let mut model = Self {
            config,
            vocabulary,
            idf,
            doc_vectors: Vec::new(),
            postings: Vec::new(),
        };
        model.doc_vectors = analyzed.iter().map(|terms| model.vectorize_terms(terms)).collect();
        model.rebuild_postings();
        model
    }

    pub fn rebuild_postings(&mut self) {
        let mut postings = vec![Vec::new(); self.idf.len()];
        for (doc, vec) in self.doc_vectors.iter().enumerate() {
            for &(term, w) in vec {
                postings[term as usize].push((doc as u32, w));
            }
        }
        self.postings = postings;
    }

    fn vectorize_terms(&self, terms: &[String]) -> SparseVec {
        let mut counts: HashMap<u32, usize> = HashMap::new();
        for t in terms {
            if let Some(&id) = self.vocabulary.get(t) {
                *counts.entry(id).or_default() += 1;
            }
        }
        self.weigh(counts)
    }

    /// L2-normalized TF-IDF weights from raw term counts.
    pub fn weigh(&self, counts: HashMap<u32, usize>) -> SparseVec {
        let mut v: SparseVec = counts
            .into_iter()
            .map(|(id, c)| {
                let tf = if self.config.sublinear_tf {
                    1.0 + (c as f64).ln()
                } else {
                    c as f64
                };
                (id, tf * self.idf[id as usize])
            })
            .collect();
        v.sort_unstable_by_key(|&(id, _)| id);
        let norm = v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, w) in &mut v {
                *w /= norm;
            }
        }
        v
    }

    pub fn vectorize(&self, text: &str) -> SparseVec {
        self.vectorize_terms(&analyze(text, self.config.bigrams))
    }

    /// Cosine score of `query` against every document, in document order.
    pub fn scores(&self, query: &SparseVec) -> Vec<f64> {
        let mut scores = vec![0.0; self.doc_vectors.len()];
        for &(term, qw) in query {
            for &(doc, dw) in &self.postings[term as usize] {
                scores[doc as usize] += qw * dw;
            }
        }
        scores
    }
}

/// Cosine similarity of two sorted sparse vectors.
pub fn sparse_cosine(a: &SparseVec, b: &SparseVec) -> f64 {
    let (mut i, mut j, mut dot) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                dot += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    let na = a.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    let nb = b.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analyzer_drops_single_chars_and_adds_bigrams() {
        assert_eq!(
            analyze("A cat, the Dog!", true),
            ["cat", "the", "dog", "cat the", "the dog"]
        );
        assert_eq!(analyze("x y", true), Vec::<String>::new());
    }

    #[test]
    fn smoothed_idf_and_log_tf() {
        let texts = vec!["apple apple banana".to_owned(), "banana cherry".to_owned()];
        let cfg = TfidfConfig {
            sublinear_tf: true,
            bigrams: false,
        };
        let m = TfidfModel::fit(&texts, cfg);
        let apple = m.vocabulary["apple"] as usize;
        let banana = m.vocabulary["banana"] as usize;
        assert!((m.idf[apple] - ((3.0f64 / 2.0).ln() + 1.0)).abs() < 1e-12);
        assert!((m.idf[banana] - 1.0).abs() < 1e-12);
        let v = &m.doc_vectors[0];
        let wa = (1.0 + 2f64.ln()) * m.idf[apple];
        let wb = 1.0;
        let norm = (wa * wa + wb * wb).sqrt();
        assert!((v[0].1 - wa / norm).abs() < 1e-12);
        assert!((v[1].1 - wb / norm).abs() < 1e-12);
    }
}
