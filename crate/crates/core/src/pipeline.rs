//! End-to-end inference: candidate abstracts, joint model, post-processing.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Claim, Corpus, Stance};
use crate::error::{Error, Result};
use crate::evaluation::{postprocess, Prediction};
use crate::model::{Domain, JointModel, ModelOutput};
use crate::retrieval::Retriever;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Candidates from the retriever.
    Open,
    /// Candidates are the claim's evidence docs plus its cited docs.
    Oracle,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open" => Ok(Task::Open),
            "oracle" => Ok(Task::Oracle),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub task: Task,
    pub k_retrieval: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            task: Task::Open,
            k_retrieval: 30,
        }
    }
}

pub fn oracle_candidates(claim: &Claim) -> Vec<u64> {
    let set: BTreeSet<u64> = claim.evidence.keys().chain(&claim.cited_doc_ids).copied().collect();
    set.into_iter().collect()
}

/// Raw model outputs and post-processed predictions, in claim order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineResult {
    pub outputs: Vec<ModelOutput>,
    pub predictions: Vec<Prediction>,
}

/// Runs every claim through candidate selection and the model. The retriever
/// is only consulted in open mode.
pub fn run_pipeline<T: Scalar>(
    config: &PipelineConfig,
    claims: &[Claim],
    corpus: &Corpus,
    model: &JointModel<T>,
    retriever: Option<&(dyn Retriever + Sync)>,
) -> Result<PipelineResult> {
    if config.task == Task::Open && retriever.is_none() {
        return Err(Error::Config("open task requires a retrieval index".into()));
    }
    let domain = Domain::Scifact;
    let per_claim: Vec<Result<Vec<ModelOutput>>> = claims
        .par_iter()
        .map(|claim| {
            let candidates = match config.task {
                Task::Oracle => oracle_candidates(claim),
                Task::Open => retriever
                    .expect("checked above")
                    .retrieve(&claim.text, config.k_retrieval)
                    .into_iter()
                    .map(|r| r.doc_id)
                    .collect(),
            };
            if candidates.is_empty() {
                log::warn!("claim {}: no candidate abstracts", claim.id);
            }
            candidates
                .into_iter()
                .map(|doc_id| {
                    let doc = corpus
                        .get(doc_id)
                        .ok_or_else(|| Error::Integrity(format!("claim {}: doc {doc_id} not in corpus", claim.id)))?;
                    model.predict(claim.id, &claim.text, doc_id, &doc.sentences, domain)
                })
                .collect()
        })
        .collect();
    let mut outputs = Vec::new();
    for r in per_claim {
        outputs.extend(r?);
    }
    let predictions = postprocess(&outputs.iter().map(Prediction::from_output).collect::<Vec<_>>());
    Ok(PipelineResult { outputs, predictions })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionEvidence {
    pub sentences: Vec<usize>,
    pub label: String,
}

/// One line of the SciFact submission format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionLine {
    pub id: u64,
    pub evidence: BTreeMap<String, SubmissionEvidence>,
}

/// Groups predictions by claim. Every claim in `claim_ids` gets a line;
/// `NoInfo` predictions are omitted from the evidence map.
pub fn to_submission(claim_ids: &[u64], preds: &[Prediction]) -> Vec<SubmissionLine> {
    let mut by_claim: BTreeMap<u64, BTreeMap<String, SubmissionEvidence>> = BTreeMap::new();
    for p in preds.iter().filter(|p| p.label != Stance::NoInfo) {
        by_claim.entry(p.claim_id).or_default().insert(
            p.doc_id.to_string(),
            SubmissionEvidence {
                sentences: p.sentences.iter().copied().collect(),
                label: p.label.scifact_label().to_owned(),
            },
        );
    }
    claim_ids
        .iter()
        .map(|&id| SubmissionLine {
            id,
            evidence: by_claim.remove(&id).unwrap_or_default(),
        })
        .collect()
}

pub fn from_submission(lines: &[SubmissionLine]) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for line in lines {
        for (doc, ev) in &line.evidence {
            let doc_id = doc
                .parse()
                .map_err(|_| Error::Integrity(format!("claim {}: doc id {doc:?} is not an integer", line.id)))?;
            out.push(Prediction {
                claim_id: line.id,
                doc_id,
                sentences: ev.sentences.iter().copied().collect(),
                label: Stance::from_scifact_label(&ev.label)?,
            });
        }
    }
    Ok(out)
}

pub fn write_jsonl<S: Serialize>(path: impl AsRef<Path>, items: &[S]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<S: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<S>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Reads predictions from either model-output or submission JSONL.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let values: Vec<serde_json::Value> = read_jsonl(&path)?;
    let is_submission = values.first().is_some_and(|v| v.get("evidence").is_some());
    if is_submission {
        let lines: Vec<SubmissionLine> = values
            .into_iter()
            .map(serde_json::from_value)
            .collect::<std::result::Result<_, _>>()?;
        from_submission(&lines)
    } else {
        let outputs: Vec<ModelOutput> = values
            .into_iter()
            .map(serde_json::from_value)
            .collect::<std::result::Result<_, _>>()?;
        Ok(postprocess(&outputs.iter().map(Prediction::from_output).collect::<Vec<_>>()))
    }
}
