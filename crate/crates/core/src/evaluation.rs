//! Sentence- and abstract-level F1, retrieval P/R/F1 and output post-processing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{Claim, ClaimInstance, Stance};
use crate::model::ModelOutput;

/// Final verdict for one (claim, abstract) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub claim_id: u64,
    pub doc_id: u64,
    pub sentences: BTreeSet<usize>,
    pub label: Stance,
}

impl Prediction {
    pub fn from_output(out: &ModelOutput) -> Self {
        Self {
            claim_id: out.claim_id,
            doc_id: out.doc_id,
            sentences: out.selected.iter().copied().collect(),
            label: out.argmax_stance(),
        }
    }

    fn is_positive(&self) -> bool {
        self.label != Stance::NoInfo
    }
}

/// Forces `NoInfo` wherever no rationale sentence was proposed.
pub fn postprocess(preds: &[Prediction]) -> Vec<Prediction> {
    preds
        .iter()
        .map(|p| {
            let mut p = p.clone();
            if p.sentences.is_empty() {
                p.label = Stance::NoInfo;
            }
            p
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldPair {
    pub label: Stance,
    pub rationale_sets: Vec<BTreeSet<usize>>,
}

impl GoldPair {
    pub fn rationale_union(&self) -> BTreeSet<usize> {
        self.rationale_sets.iter().flatten().copied().collect()
    }
}

/// Gold evidence keyed by (claim id, doc id); only supporting or refuting pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GoldSet {
    pub pairs: BTreeMap<(u64, u64), GoldPair>,
}

impl GoldSet {
    pub fn from_claims(claims: &[Claim]) -> Self {
        let mut pairs = BTreeMap::new();
        for c in claims {
            for (&doc_id, ev) in &c.evidence {
                if ev.label == Stance::NoInfo {
                    continue;
                }
                pairs.insert(
                    (c.id, doc_id),
                    GoldPair {
                        label: ev.label,
                        rationale_sets: ev.rationale_sets.iter().map(|s| s.iter().copied().collect()).collect(),
                    },
                );
            }
        }
        Self { pairs }
    }

    /// Gold pairs from training instances; indices refer to the instance's sentences.
    pub fn from_instances(instances: &[ClaimInstance]) -> Self {
        let pairs = instances
            .iter()
            .filter(|i| i.stance != Stance::NoInfo)
            .map(|i| {
                (
                    (i.claim_id, i.doc_id),
                    GoldPair {
                        label: i.stance,
                        rationale_sets: i.rationale_sets.iter().map(|s| s.iter().copied().collect()).collect(),
                    },
                )
            })
            .collect();
        Self { pairs }
    }

    pub fn get(&self, claim_id: u64, doc_id: u64) -> Option<&GoldPair> {
        self.pairs.get(&(claim_id, doc_id))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Gold evidence doc ids per claim.
    pub fn docs_by_claim(&self) -> BTreeMap<u64, BTreeSet<u64>> {
        let mut out: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
        for &(c, d) in self.pairs.keys() {
            out.entry(c).or_default().insert(d);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Ratios with the zero convention for empty denominators.
    pub fn from_counts(tp: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, gold);
        Self {
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Scoring options. `max_sentences` mimics the leaderboard's per-abstract cap
/// by keeping the lowest-indexed sentences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub max_sentences: Option<usize>,
}

fn capped(p: &Prediction, opts: EvalOptions) -> BTreeSet<usize> {
    match opts.max_sentences {
        Some(cap) => p.sentences.iter().copied().take(cap).collect(),
        None => p.sentences.clone(),
    }
}

/// Sentence-level scoring. `NoInfo` predictions contribute no sentences.
pub fn sentence_level_f1(preds: &[Prediction], gold: &GoldSet, require_label: bool) -> Prf {
    sentence_level_f1_with(preds, gold, require_label, EvalOptions::default())
}

pub fn sentence_level_f1_with(preds: &[Prediction], gold: &GoldSet, require_label: bool, opts: EvalOptions) -> Prf {
    let mut tp = 0;
    let mut predicted = 0;
    for p in preds.iter().filter(|p| p.is_positive()) {
        let sentences = capped(p, opts);
        predicted += sentences.len();
        let Some(g) = gold.get(p.claim_id, p.doc_id) else {
            continue;
        };
        if require_label && g.label != p.label {
            continue;
        }
        let union = g.rationale_union();
        tp += sentences.intersection(&union).count();
    }
    let gold_count = gold.pairs.values().map(|g| g.rationale_union().len()).sum();
    Prf::from_counts(tp, predicted, gold_count)
}

/// Abstract-level scoring over supporting/refuting predictions.
pub fn abstract_level_f1(preds: &[Prediction], gold: &GoldSet, require_rationale: bool) -> Prf {
    abstract_level_f1_with(preds, gold, require_rationale, EvalOptions::default())
}

pub fn abstract_level_f1_with(preds: &[Prediction], gold: &GoldSet, require_rationale: bool, opts: EvalOptions) -> Prf {
    let mut tp = 0;
    let mut predicted = 0;
    for p in preds.iter().filter(|p| p.is_positive()) {
        predicted += 1;
        let Some(g) = gold.get(p.claim_id, p.doc_id) else {
            continue;
        };
        if g.label != p.label {
            continue;
        }
        let sentences = capped(p, opts);
        if !require_rationale || g.rationale_sets.iter().any(|s| s.is_subset(&sentences)) {
            tp += 1;
        }
    }
    Prf::from_counts(tp, predicted, gold.len())
}

/// Micro-averaged retrieval scores; each list is truncated to `k`.
pub fn retrieval_metrics(retrieved: &BTreeMap<u64, Vec<u64>>, gold: &BTreeMap<u64, BTreeSet<u64>>, k: usize) -> Prf {
    let mut tp = 0;
    let mut total = 0;
    for (claim, docs) in retrieved {
        let docs = &docs[..docs.len().min(k)];
        total += docs.len();
        if let Some(g) = gold.get(claim) {
            tp += docs.iter().filter(|d| g.contains(d)).count();
        }
    }
    let gold_total = gold.values().map(BTreeSet::len).sum();
    Prf::from_counts(tp, total, gold_total)
}

/// Gold evidence documents per claim, including claims without evidence.
pub fn gold_evidence_docs(claims: &[Claim]) -> BTreeMap<u64, BTreeSet<u64>> {
    claims.iter().map(|c| (c.id, c.evidence.keys().copied().collect())).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sentence_selection_only: Prf,
    pub sentence_selection_label: Prf,
    pub abstract_label_only: Prf,
    pub abstract_label_rationale: Prf,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub retrieval: Option<Prf>,
}

/// All four F1 variants; predictions are post-processed first.
pub fn evaluate(preds: &[Prediction], gold: &GoldSet, opts: EvalOptions) -> MetricsReport {
    let preds = postprocess(preds);
    MetricsReport {
        sentence_selection_only: sentence_level_f1_with(&preds, gold, false, opts),
        sentence_selection_label: sentence_level_f1_with(&preds, gold, true, opts),
        abstract_label_only: abstract_level_f1_with(&preds, gold, false, opts),
        abstract_label_rationale: abstract_level_f1_with(&preds, gold, true, opts),
        retrieval: None,
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("sentence  selection-only ", self.sentence_selection_only),
            ("sentence  selection+label", self.sentence_selection_label),
            ("abstract  label-only     ", self.abstract_label_only),
            ("abstract  label+rationale", self.abstract_label_rationale),
        ];
        writeln!(f, "{:<26} {:>9} {:>9} {:>9}", "metric", "P", "R", "F1")?;
        for (name, m) in rows.iter().copied().chain(self.retrieval.map(|r| ("retrieval                ", r))) {
            writeln!(
                f,
                "{name:<26} {:>9.4} {:>9.4} {:>9.4}",
                m.precision, m.recall, m.f1
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(sentences: &[usize], label: Stance) -> Prediction {
        Prediction {
            claim_id: 1,
            doc_id: 10,
            sentences: sentences.iter().copied().collect(),
            label,
        }
    }

    fn gold() -> GoldSet {
        let mut pairs = BTreeMap::new();
        pairs.insert(
            (1, 10),
            GoldPair {
                label: Stance::Supports,
                rationale_sets: vec![[0, 1].into(), [3].into()],
            },
        );
        GoldSet { pairs }
    }

    #[test]
    fn empty_rationale_forces_noinfo() {
        let out = postprocess(&[pred(&[], Stance::Supports), pred(&[2], Stance::Refutes)]);
        assert_eq!(out[0].label, Stance::NoInfo);
        assert_eq!(out[1].label, Stance::Refutes);
        assert_eq!(postprocess(&out), out);
    }

    #[test]
    fn partial_coverage_only_counts_for_label_only() {
        let p = [pred(&[0, 2], Stance::Supports)];
        assert_eq!(abstract_level_f1(&p, &gold(), false).f1, 1.0);
        assert_eq!(abstract_level_f1(&p, &gold(), true).f1, 0.0);
        let s = sentence_level_f1(&p, &gold(), true);
        assert_eq!((s.precision, s.recall), (0.5, 1.0 / 3.0));
    }

    #[test]
    fn cap_keeps_lowest_indices() {
        let p = [pred(&[0, 1, 3], Stance::Supports)];
        let opts = EvalOptions { max_sentences: Some(2) };
        let s = sentence_level_f1_with(&p, &gold(), false, opts);
        assert_eq!((s.precision, s.recall), (1.0, 2.0 / 3.0));
    }

    #[test]
    fn zero_convention() {
        assert_eq!(Prf::from_counts(0, 0, 0), Prf::default());
        assert_eq!(f1(0.0, 0.0), 0.0);
    }
}
