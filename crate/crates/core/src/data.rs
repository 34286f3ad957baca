//! Corpus and claim loading, training-instance construction, negative sampling
//! and sentence down-sampling.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::Retriever;

/// Three-way verdict of an abstract toward a claim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stance {
    Supports,
    Refutes,
    #[serde(rename = "NOINFO")]
    NoInfo,
}

impl Stance {
    pub const ALL: [Stance; 3] = [Stance::Supports, Stance::Refutes, Stance::NoInfo];

    pub fn index(self) -> usize {
        match self {
            Stance::Supports => 0,
            Stance::Refutes => 1,
            Stance::NoInfo => 2,
        }
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    /// Label string used by SciFact claim and submission files.
    pub fn scifact_label(self) -> &'static str {
        match self {
            Stance::Supports => "SUPPORT",
            Stance::Refutes => "CONTRADICT",
            Stance::NoInfo => "NOT_ENOUGH_INFO",
        }
    }

    pub fn from_scifact_label(s: &str) -> Result<Self> {
        match s {
            "SUPPORT" => Ok(Stance::Supports),
            "CONTRADICT" => Ok(Stance::Refutes),
            "NOT_ENOUGH_INFO" | "NOINFO" => Ok(Stance::NoInfo),
            other => Err(Error::UnknownLabel(other.to_owned())),
        }
    }

    pub fn from_fever_label(s: &str) -> Result<Self> {
        match s {
            "SUPPORTS" => Ok(Stance::Supports),
            "REFUTES" => Ok(Stance::Refutes),
            "NOT ENOUGH INFO" => Ok(Stance::NoInfo),
            other => Err(Error::UnknownLabel(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbstractDoc {
    pub doc_id: u64,
    pub title: String,
    pub sentences: Vec<String>,
}

impl AbstractDoc {
    /// Title and every sentence joined by single spaces.
    pub fn full_text(&self) -> String {
        let mut s = self.title.clone();
        for sent in &self.sentences {
            s.push(' ');
            s.push_str(sent);
        }
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    docs: BTreeMap<u64, AbstractDoc>,
}

impl Corpus {
    pub fn from_docs(docs: impl IntoIterator<Item = AbstractDoc>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for d in docs {
            validate_doc(&d).map_err(Error::Integrity)?;
            let id = d.doc_id;
            if map.insert(id, d).is_some() {
                return Err(Error::Integrity(format!("duplicate doc_id {id}")));
            }
        }
        Ok(Self { docs: map })
    }

    pub fn get(&self, doc_id: u64) -> Option<&AbstractDoc> {
        self.docs.get(&doc_id)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Documents in ascending `doc_id` order.
    pub fn iter(&self) -> impl Iterator<Item = &AbstractDoc> {
        self.docs.values()
    }
}

fn validate_doc(d: &AbstractDoc) -> std::result::Result<(), String> {
    if d.sentences.is_empty() {
        return Err(format!("doc {} has no sentences", d.doc_id));
    }
    if let Some(i) = d.sentences.iter().position(String::is_empty) {
        return Err(format!("doc {} sentence {i} is empty", d.doc_id));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocEvidence {
    pub label: Stance,
    pub rationale_sets: Vec<Vec<usize>>,
}

impl DocEvidence {
    /// Sorted union of every rationale set.
    pub fn rationale_union(&self) -> BTreeSet<usize> {
        self.rationale_sets.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub id: u64,
    pub text: String,
    pub evidence: BTreeMap<u64, DocEvidence>,
    pub cited_doc_ids: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Gold,
    NegativeSample,
    Downsampled,
}

/// One (claim, abstract) pair with per-sentence rationale targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimInstance {
    pub claim_id: u64,
    pub claim: String,
    pub doc_id: u64,
    pub sentences: Vec<String>,
    pub rationale_mask: Vec<bool>,
    /// Gold rationale sets, indexed into `sentences`.
    pub rationale_sets: Vec<Vec<usize>>,
    pub stance: Stance,
    pub origin: Origin,
}

impl ClaimInstance {
    pub fn num_rationales(&self) -> usize {
        self.rationale_mask.iter().filter(|&&b| b).count()
    }
}

fn read_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(f).lines().enumerate().map(|(i, l)| (i + 1, l)))
}

fn parse_line<T: serde::de::DeserializeOwned>(path: &Path, line_no: usize, line: &str) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::Parse {
        path: path.to_owned(),
        line: line_no,
        message: e.to_string(),
    })
}

#[derive(Deserialize)]
struct RawDoc {
    doc_id: u64,
    title: String,
    #[serde(rename = "abstract")]
    sentences: Vec<String>,
}

/// Reads a corpus JSONL file (`doc_id`, `title`, `abstract`). Blank lines are skipped.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let mut docs = BTreeMap::new();
    for (line_no, line) in read_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDoc = parse_line(path, line_no, &line)?;
        let doc = AbstractDoc {
            doc_id: raw.doc_id,
            title: raw.title,
            sentences: raw.sentences,
        };
        validate_doc(&doc).map_err(|message| Error::Parse {
            path: path.to_owned(),
            line: line_no,
            message,
        })?;
        if docs.contains_key(&doc.doc_id) {
            return Err(Error::Integrity(format!(
                "duplicate doc_id {} at {}:{line_no}",
                doc.doc_id,
                path.display()
            )));
        }
        docs.insert(doc.doc_id, doc);
    }
    Ok(Corpus { docs })
}

#[derive(Deserialize)]
struct RawEvidence {
    sentences: Vec<usize>,
    label: String,
}

#[derive(Deserialize)]
struct RawClaim {
    id: u64,
    claim: String,
    #[serde(default)]
    evidence: BTreeMap<String, Vec<RawEvidence>>,
    #[serde(default)]
    cited_doc_ids: Vec<u64>,
}

/// Reads a SciFact claims JSONL file. Evidence doc ids are checked against the
/// corpus later, in [`build_instances`].
pub fn load_claims(path: impl AsRef<Path>) -> Result<Vec<Claim>> {
    let path = path.as_ref();
    let mut claims = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawClaim = parse_line(path, line_no, &line)?;
        let parse_err = |message: String| Error::Parse {
            path: path.to_owned(),
            line: line_no,
            message,
        };
        let mut evidence = BTreeMap::new();
        for (doc_key, entries) in raw.evidence {
            let doc_id: u64 = doc_key
                .parse()
                .map_err(|_| parse_err(format!("evidence key {doc_key:?} is not a doc id")))?;
            let mut label = None;
            let mut sets = Vec::new();
            for e in entries {
                let l = Stance::from_scifact_label(&e.label)?;
                if l == Stance::NoInfo {
                    return Err(parse_err(format!("evidence for doc {doc_id} labelled {}", e.label)));
                }
                match label {
                    None => label = Some(l),
                    Some(prev) if prev != l => {
                        return Err(Error::Integrity(format!(
                            "claim {} has conflicting labels for doc {doc_id}",
                            raw.id
                        )))
                    }
                    Some(_) => {}
                }
                sets.push(e.sentences);
            }
            if let Some(label) = label {
                evidence.insert(
                    doc_id,
                    DocEvidence {
                        label,
                        rationale_sets: sets,
                    },
                );
            }
        }
        claims.push(Claim {
            id: raw.id,
            text: raw.claim,
            evidence,
            cited_doc_ids: raw.cited_doc_ids,
        });
    }
    Ok(claims)
}

fn positive_instance(claim: &Claim, doc: &AbstractDoc, ev: &DocEvidence) -> Result<ClaimInstance> {
    let n = doc.sentences.len();
    let mut mask = vec![false; n];
    for set in &ev.rationale_sets {
        for &i in set {
            if i >= n {
                return Err(Error::Integrity(format!(
                    "claim {}: rationale index {i} out of range for doc {} ({n} sentences)",
                    claim.id, doc.doc_id
                )));
            }
            mask[i] = true;
        }
    }
    Ok(ClaimInstance {
        claim_id: claim.id,
        claim: claim.text.clone(),
        doc_id: doc.doc_id,
        sentences: doc.sentences.clone(),
        rationale_mask: mask,
        rationale_sets: ev.rationale_sets.clone(),
        stance: ev.label,
        origin: Origin::Gold,
    })
}

fn negative_instance(claim_id: u64, claim: &str, doc: &AbstractDoc) -> ClaimInstance {
    ClaimInstance {
        claim_id,
        claim: claim.to_owned(),
        doc_id: doc.doc_id,
        sentences: doc.sentences.clone(),
        rationale_mask: vec![false; doc.sentences.len()],
        rationale_sets: Vec::new(),
        stance: Stance::NoInfo,
        origin: Origin::NegativeSample,
    }
}

/// Positive instances from gold evidence plus up to `k_train` retrieved
/// negatives per claim. Negatives are the highest-ranked non-evidence docs.
pub fn build_instances(
    claims: &[Claim],
    corpus: &Corpus,
    retriever: &(dyn Retriever + Sync),
    k_train: usize,
) -> Result<Vec<ClaimInstance>> {
    let per_claim: Vec<Result<Vec<ClaimInstance>>> = claims
        .par_iter()
        .map(|claim| {
            let mut out = Vec::new();
            for (&doc_id, ev) in &claim.evidence {
                let doc = corpus.get(doc_id).ok_or_else(|| {
                    Error::Integrity(format!("claim {}: evidence doc {doc_id} not in corpus", claim.id))
                })?;
                out.push(positive_instance(claim, doc, ev)?);
            }
            if k_train > 0 {
                let ranked = retriever.retrieve(&claim.text, k_train + claim.evidence.len());
                for r in ranked
                    .iter()
                    .filter(|r| !claim.evidence.contains_key(&r.doc_id))
                    .take(k_train)
                {
                    let doc = corpus.get(r.doc_id).ok_or_else(|| {
                        Error::Integrity(format!("retrieved doc {} not in corpus", r.doc_id))
                    })?;
                    out.push(negative_instance(claim.id, &claim.text, doc));
                }
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for r in per_claim {
        all.extend(r?);
    }
    Ok(all)
}

/// Copy of `inst` with each non-rationale sentence dropped independently with
/// probability `p_drop`. Rationale sentences always survive, and at least one
/// sentence survives overall.
pub fn downsample_sentences<R: Rng + ?Sized>(inst: &ClaimInstance, p_drop: f64, rng: &mut R) -> ClaimInstance {
    assert!((0.0..1.0).contains(&p_drop), "p_drop must lie in [0, 1), got {p_drop}");
    let n = inst.sentences.len();
    let mut keep: Vec<bool> = inst
        .rationale_mask
        .iter()
        .map(|&is_rationale| is_rationale || rng.gen::<f64>() >= p_drop)
        .collect();
    if n > 0 && !keep.iter().any(|&k| k) {
        keep[rng.gen_range(0..n)] = true;
    }
    let mut remap = vec![usize::MAX; n];
    let mut sentences = Vec::new();
    let mut mask = Vec::new();
    for i in (0..n).filter(|&i| keep[i]) {
        remap[i] = sentences.len();
        sentences.push(inst.sentences[i].clone());
        mask.push(inst.rationale_mask[i]);
    }
    let rationale_sets = inst
        .rationale_sets
        .iter()
        .map(|set| set.iter().map(|&i| remap[i]).collect())
        .collect();
    ClaimInstance {
        sentences,
        rationale_mask: mask,
        rationale_sets,
        origin: Origin::Downsampled,
        ..inst.clone()
    }
}

#[derive(Deserialize)]
struct RawFever {
    id: u64,
    claim: String,
    label: String,
    #[serde(default)]
    evidence: Vec<(String, usize)>,
}

/// Sentences kept per FEVER page.
pub const FEVER_MAX_SENTENCES: usize = 30;

/// Reads FEVER claims adapted to paragraph granularity.
///
/// Each line is `{"id", "claim", "label", "evidence": [[page_title, sentence_index], ...]}`
/// and `pages` holds the Wikipedia pages in corpus format, looked up by title.
/// Evidence is grouped per page into one instance; `NOT ENOUGH INFO` claims take
/// the top retrieved page as their NOINFO instance. Every claim additionally
/// gets `k_fever` retrieved negative pages. Pages are truncated to
/// [`FEVER_MAX_SENTENCES`]; evidence pointing past the cut is dropped, and a
/// page left without evidence is skipped.
pub fn load_fever(
    path: impl AsRef<Path>,
    pages: &Corpus,
    retriever: &(dyn Retriever + Sync),
    k_fever: usize,
) -> Result<Vec<ClaimInstance>> {
    let path = path.as_ref();
    let by_title: HashMap<&str, &AbstractDoc> = pages.iter().map(|d| (d.title.as_str(), d)).collect();
    let truncate = |d: &AbstractDoc| AbstractDoc {
        doc_id: d.doc_id,
        title: d.title.clone(),
        sentences: d.sentences.iter().take(FEVER_MAX_SENTENCES).cloned().collect(),
    };
    let mut out = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawFever = parse_line(path, line_no, &line)?;
        let stance = Stance::from_fever_label(&raw.label)?;
        let mut used: BTreeSet<u64> = BTreeSet::new();
        if stance == Stance::NoInfo {
            if let Some(top) = retriever.retrieve(&raw.claim, 1).first() {
                let page = pages
                    .get(top.doc_id)
                    .ok_or_else(|| Error::Integrity(format!("retrieved page {} missing", top.doc_id)))?;
                let mut inst = negative_instance(raw.id, &raw.claim, &truncate(page));
                inst.origin = Origin::Gold;
                used.insert(page.doc_id);
                out.push(inst);
            }
        } else {
            let mut grouped: BTreeMap<u64, BTreeSet<usize>> = BTreeMap::new();
            for (title, sent) in &raw.evidence {
                let page = by_title.get(title.as_str()).ok_or_else(|| {
                    Error::Integrity(format!("FEVER claim {}: unknown page {title:?}", raw.id))
                })?;
                grouped.entry(page.doc_id).or_default().insert(*sent);
            }
            for (doc_id, sents) in grouped {
                used.insert(doc_id);
                let page = truncate(pages.get(doc_id).expect("page looked up by title"));
                let kept: Vec<usize> = sents.into_iter().filter(|&i| i < page.sentences.len()).collect();
                if kept.is_empty() {
                    log::warn!("FEVER claim {}: evidence on page {doc_id} beyond truncation, skipped", raw.id);
                    continue;
                }
                let ev = DocEvidence {
                    label: stance,
                    rationale_sets: vec![kept],
                };
                let claim = Claim {
                    id: raw.id,
                    text: raw.claim.clone(),
                    evidence: BTreeMap::new(),
                    cited_doc_ids: Vec::new(),
                };
                out.push(positive_instance(&claim, &page, &ev)?);
            }
        }
        let ranked = retriever.retrieve(&raw.claim, k_fever + used.len());
        for r in ranked.iter().filter(|r| !used.contains(&r.doc_id)).take(k_fever) {
            let page = pages
                .get(r.doc_id)
                .ok_or_else(|| Error::Integrity(format!("retrieved page {} missing", r.doc_id)))?;
            out.push(negative_instance(raw.id, &raw.claim, &truncate(page)));
        }
    }
    Ok(out)
}

/// Writes the instance cache: one JSON object per line.
pub fn write_instances(path: impl AsRef<Path>, instances: &[ClaimInstance]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_instances(path: impl AsRef<Path>) -> Result<Vec<ClaimInstance>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: ClaimInstance = parse_line(path, line_no, &line)?;
        if inst.rationale_mask.len() != inst.sentences.len() {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: line_no,
                message: "rationale_mask length differs from sentence count".into(),
            });
        }
        out.push(inst);
    }
    Ok(out)
}
