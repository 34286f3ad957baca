//! Abstract retrieval: rank corpus documents by cosine similarity to a claim.

mod embedding;
mod tfidf;

use std::cmp::Ordering;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use embedding::{dense_cosine, HashedBowEmbedder, SentenceEmbedder, HASHED_BOW_DIM};
pub use tfidf::{analyze, sparse_cosine, SparseVec, TfidfConfig, TfidfModel};

use crate::data::Corpus;
use crate::error::{Error, Result};

pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Tfidf,
    Embedding,
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tfidf" => Ok(Backend::Tfidf),
            "embedding" => Ok(Backend::Embedding),
            other => Err(Error::Config(format!("unknown retrieval backend {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub doc_id: u64,
    pub score: f64,
}

pub trait Retriever {
    /// Top `k` documents by descending score, ties by ascending doc id.
    fn retrieve(&self, query: &str, k: usize) -> Vec<RankedResult>;
}

enum Representation {
    Tfidf(TfidfModel),
    Embedding {
        embedder: Arc<dyn SentenceEmbedder>,
        vectors: Vec<Vec<f64>>,
    },
}

/// Per-document vectors for one backend. Immutable once built.
pub struct RetrievalIndex {
    doc_ids: Vec<u64>,
    repr: Representation,
}

/// A document's stored representation.
#[derive(Debug, Clone, PartialEq)]
pub enum DocVector {
    Sparse(SparseVec),
    Dense(Vec<f64>),
}

impl RetrievalIndex {
    pub fn build(corpus: &Corpus, backend: Backend, embedder: Option<Arc<dyn SentenceEmbedder>>) -> Result<Self> {
        match backend {
            Backend::Tfidf => Ok(Self::build_tfidf(corpus, TfidfConfig::default())),
            Backend::Embedding => {
                let embedder = embedder
                    .ok_or_else(|| Error::Config("embedding backend requires an embedder".into()))?;
                Ok(Self::build_embedding(corpus, embedder))
            }
        }
    }

    pub fn build_tfidf(corpus: &Corpus, config: TfidfConfig) -> Self {
        let texts: Vec<String> = corpus.iter().map(|d| d.full_text()).collect();
        Self {
            doc_ids: corpus.iter().map(|d| d.doc_id).collect(),
            repr: Representation::Tfidf(TfidfModel::fit(&texts, config)),
        }
    }

    pub fn build_embedding(corpus: &Corpus, embedder: Arc<dyn SentenceEmbedder>) -> Self {
        let vectors = corpus.iter().map(|d| embedder.embed(&d.full_text())).collect();
        Self {
            doc_ids: corpus.iter().map(|d| d.doc_id).collect(),
            repr: Representation::Embedding { embedder, vectors },
        }
    }

    pub fn backend(&self) -> Backend {
        match self.repr {
            Representation::Tfidf(_) => Backend::Tfidf,
            Representation::Embedding { .. } => Backend::Embedding,
        }
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn vector(&self, doc_id: u64) -> Option<DocVector> {
        let i = self.doc_ids.binary_search(&doc_id).ok()?;
        Some(match &self.repr {
            Representation::Tfidf(m) => DocVector::Sparse(m.doc_vectors[i].clone()),
            Representation::Embedding { vectors, .. } => DocVector::Dense(vectors[i].clone()),
        })
    }

    /// Score of every document against `query`, in ascending doc id order.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        if query.trim().is_empty() {
            log::warn!("empty claim text: every document scores 0");
        }
        match &self.repr {
            Representation::Tfidf(m) => m
                .scores(&m.vectorize(query))
                .into_iter()
                .map(|s| s.clamp(-1.0, 1.0))
                .collect(),
            Representation::Embedding { embedder, vectors } => {
                let q = embedder.embed(query);
                vectors.iter().map(|v| dense_cosine(&q, v)).collect()
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = match &self.repr {
            Representation::Tfidf(m) => IndexFile {
                version: INDEX_FORMAT_VERSION,
                backend: Backend::Tfidf,
                doc_ids: self.doc_ids.clone(),
                tfidf: Some(m.clone()),
                embedder_id: None,
                vectors: None,
            },
            Representation::Embedding { embedder, vectors } => IndexFile {
                version: INDEX_FORMAT_VERSION,
                backend: Backend::Embedding,
                doc_ids: self.doc_ids.clone(),
                tfidf: None,
                embedder_id: Some(embedder.id()),
                vectors: Some(vectors.clone()),
            },
        };
        let bytes = serde_json::to_vec(&file)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Loads a saved index. For the embedding backend, `embedder` must match the
    /// stored embedder id; the built-in hashed embedder is recreated when omitted.
    pub fn load(path: impl AsRef<Path>, embedder: Option<Arc<dyn SentenceEmbedder>>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: IndexFile = serde_json::from_slice(&bytes)?;
        if file.version != INDEX_FORMAT_VERSION {
            return Err(Error::Version {
                expected: INDEX_FORMAT_VERSION,
                found: file.version,
            });
        }
        let repr = match file.backend {
            Backend::Tfidf => {
                let mut m = file
                    .tfidf
                    .ok_or_else(|| Error::Config("tfidf index file without model".into()))?;
                m.rebuild_postings();
                Representation::Tfidf(m)
            }
            Backend::Embedding => {
                let stored = file.embedder_id.unwrap_or_default();
                let embedder = match embedder {
                    Some(e) => e,
                    None if stored == HashedBowEmbedder::default().id() => Arc::new(HashedBowEmbedder::default()),
                    None => return Err(Error::Config(format!("index needs embedder {stored:?}"))),
                };
                if embedder.id() != stored {
                    return Err(Error::Config(format!(
                        "index built with embedder {stored:?}, got {:?}",
                        embedder.id()
                    )));
                }
                Representation::Embedding {
                    embedder,
                    vectors: file.vectors.unwrap_or_default(),
                }
            }
        };
        Ok(Self {
            doc_ids: file.doc_ids,
            repr,
        })
    }
}

impl Retriever for RetrievalIndex {
    fn retrieve(&self, query: &str, k: usize) -> Vec<RankedResult> {
        let mut ranked: Vec<RankedResult> = self
            .doc_ids
            .iter()
            .zip(self.scores(query))
            .map(|(&doc_id, score)| RankedResult { doc_id, score })
            .collect();
        ranked.sort_by(rank_order);
        ranked.truncate(k);
        ranked
    }
}

fn rank_order(a: &RankedResult, b: &RankedResult) -> Ordering {
    b.score.total_cmp(&a.score).then(a.doc_id.cmp(&b.doc_id))
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    version: u32,
    backend: Backend,
    doc_ids: Vec<u64>,
    tfidf: Option<TfidfModel>,
    embedder_id: Option<String>,
    vectors: Option<Vec<Vec<f64>>>,
}
