use crate::tokenizer::{fnv1a, split_words};

/// Maps text to a fixed-dimension vector. Implementations must be deterministic.
pub trait SentenceEmbedder: Send + Sync {
    /// Stable identifier persisted with an index.
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

pub const HASHED_BOW_DIM: usize = 700;

/// Signed feature-hashing projection of the bag of words, L2-normalized.
/// Stands in for a pretrained biomedical sentence embedder.
#[derive(Debug, Clone, Copy)]
pub struct HashedBowEmbedder {
    dim: usize,
}

impl HashedBowEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0);
        Self { dim }
    }
}

impl Default for HashedBowEmbedder {
    fn default() -> Self {
        Self::new(HASHED_BOW_DIM)
    }
}

impl SentenceEmbedder for HashedBowEmbedder {
    fn id(&self) -> String {
        format!("hashed-bow-{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for w in split_words(text) {
            let h = fnv1a(w.as_bytes());
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

pub fn dense_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}
