#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use parajoint::data::{AbstractDoc, Claim, ClaimInstance, Corpus, DocEvidence, Origin, Stance};
use parajoint::encoder::{EncoderConfig, Positional};
use parajoint::evaluation::{GoldPair, GoldSet, Prediction};
use parajoint::heads::KgatConfig;
use parajoint::model::{JointModel, ModelConfig, StanceHeadKind};
use parajoint::tokenizer::Tokenizer;
use rand::Rng;

pub const FILLER: [&str; 16] = [
    "the", "study", "patients", "cohort", "analysis", "samples", "results", "data", "trial", "protein",
    "expression", "levels", "observed", "measured", "group", "model",
];

pub const SUBJECTS: [&str; 10] = [
    "aspirin", "insulin", "statin", "vitamin", "caffeine", "metformin", "ibuprofen", "melatonin", "zinc", "iron",
];

pub fn small_encoder(vocab_size: usize, d_model: usize, max_len: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size,
        d_model,
        n_layers: 1,
        n_heads: 2,
        d_ff: 2 * d_model,
        max_sequence_length: max_len,
        positional: Positional::Learned,
        layer_norm_eps: 1e-5,
    }
}

pub fn vocab_tokenizer() -> Tokenizer {
    let words: Vec<String> = FILLER
        .iter()
        .chain(SUBJECTS.iter())
        .chain(["increases", "decreases", "does", "affect", "risk"].iter())
        .map(|w| w.to_string())
        .collect();
    Tokenizer::from_words(words, 8)
}

pub fn small_model(head: StanceHeadKind, d_model: usize, seed: u64) -> JointModel<f64> {
    let tok = vocab_tokenizer();
    let mut config = ModelConfig::new(small_encoder(tok.vocab_size(), d_model, 128), head);
    config.kgat = KgatConfig::with_kernels(5);
    JointModel::new(config, tok, seed).expect("valid fixture model")
}

fn filler_sentence(rng: &mut impl Rng, len: usize) -> String {
    (0..len).map(|_| FILLER[rng.gen_range(0..FILLER.len())]).collect::<Vec<_>>().join(" ")
}

/// Instances whose rationale sentences carry a planted keyword: "increases"
/// for supporting evidence, "decreases" for refuting. NOINFO abstracts carry
/// neither.
pub fn planted_instances(n: usize, rng: &mut impl Rng) -> Vec<ClaimInstance> {
    (0..n)
        .map(|i| {
            let subject = SUBJECTS[i % SUBJECTS.len()];
            let stance = match i % 5 {
                0 | 2 => Stance::Supports,
                1 | 3 => Stance::Refutes,
                _ => Stance::NoInfo,
            };
            let n_sent = rng.gen_range(3..=5);
            let mut mask = vec![false; n_sent];
            if stance != Stance::NoInfo {
                mask[rng.gen_range(0..n_sent)] = true;
            }
            let keyword = if stance == Stance::Supports { "increases" } else { "decreases" };
            let sentences = mask
                .iter()
                .map(|&r| {
                    let base = filler_sentence(rng, 4);
                    if r {
                        format!("{subject} {keyword} {base}")
                    } else {
                        base
                    }
                })
                .collect();
            ClaimInstance {
                claim_id: i as u64,
                claim: format!("{subject} does affect risk"),
                doc_id: 1000 + i as u64,
                sentences,
                rationale_sets: mask.iter().enumerate().filter(|(_, &r)| r).map(|(j, _)| vec![j]).collect(),
                rationale_mask: mask,
                stance,
                origin: Origin::Gold,
            }
        })
        .collect()
}

/// Claims and corpus built from instances (one doc per instance).
pub fn claims_and_corpus(instances: &[ClaimInstance]) -> (Vec<Claim>, Corpus) {
    let mut claims: BTreeMap<u64, Claim> = BTreeMap::new();
    let mut docs = Vec::new();
    for inst in instances {
        docs.push(AbstractDoc {
            doc_id: inst.doc_id,
            title: format!("doc {}", inst.doc_id),
            sentences: inst.sentences.clone(),
        });
        let claim = claims.entry(inst.claim_id).or_insert_with(|| Claim {
            id: inst.claim_id,
            text: inst.claim.clone(),
            evidence: BTreeMap::new(),
            cited_doc_ids: Vec::new(),
        });
        claim.cited_doc_ids.push(inst.doc_id);
        if inst.stance != Stance::NoInfo {
            claim.evidence.insert(
                inst.doc_id,
                DocEvidence {
                    label: inst.stance,
                    rationale_sets: inst.rationale_sets.clone(),
                },
            );
        }
    }
    (claims.into_values().collect(), Corpus::from_docs(docs).expect("unique docs"))
}

/// Random predictions (post-processed) and gold over at most 5 claims,
/// 4 docs and 6 sentences.
pub fn random_fixture(rng: &mut impl Rng) -> (Vec<Prediction>, GoldSet) {
    let claims = rng.gen_range(1..=5u64);
    let docs = rng.gen_range(1..=4u64);
    let sents = rng.gen_range(1..=6usize);
    let mut gold = GoldSet::default();
    let mut preds = Vec::new();
    for c in 0..claims {
        for d in 0..docs {
            if rng.gen_bool(0.45) {
                let sets = (0..rng.gen_range(1..=2))
                    .map(|_| {
                        let mut s: BTreeSet<usize> = (0..sents).filter(|_| rng.gen_bool(0.3)).collect();
                        s.insert(rng.gen_range(0..sents));
                        s
                    })
                    .collect();
                let label = [Stance::Supports, Stance::Refutes][rng.gen_range(0..2)];
                gold.pairs.insert((c, d), GoldPair { label, rationale_sets: sets });
            }
            if rng.gen_bool(0.6) {
                let sentences: BTreeSet<usize> = (0..sents).filter(|_| rng.gen_bool(0.4)).collect();
                let label = if sentences.is_empty() {
                    Stance::NoInfo
                } else {
                    Stance::ALL[rng.gen_range(0..3)]
                };
                preds.push(Prediction {
                    claim_id: c,
                    doc_id: d,
                    sentences,
                    label,
                });
            }
        }
    }
    (preds, gold)
}

/// Counts by walking every (claim, doc, sentence) triple.
/// Returns `[(tp, predicted, gold)]` for selection-only, selection+label,
/// label-only and label+rationale.
pub fn brute_force_counts(preds: &[Prediction], gold: &GoldSet) -> [(usize, usize, usize); 4] {
    let mut out = [(0, 0, 0); 4];
    let claims: BTreeSet<u64> = preds.iter().map(|p| p.claim_id).chain(gold.pairs.keys().map(|k| k.0)).collect();
    let docs: BTreeSet<u64> = preds.iter().map(|p| p.doc_id).chain(gold.pairs.keys().map(|k| k.1)).collect();
    for &c in &claims {
        for &d in &docs {
            let pred = preds.iter().find(|p| p.claim_id == c && p.doc_id == d);
            let pred = pred.filter(|p| p.label != Stance::NoInfo);
            let g = gold.pairs.get(&(c, d));
            for s in 0..16 {
                let chosen = pred.is_some_and(|p| p.sentences.contains(&s));
                let gold_s = g.is_some_and(|g| g.rationale_sets.iter().any(|set| set.contains(&s)));
                if chosen {
                    out[0].1 += 1;
                    out[1].1 += 1;
                }
                if gold_s {
                    out[0].2 += 1;
                    out[1].2 += 1;
                }
                if chosen && gold_s {
                    out[0].0 += 1;
                    if pred.unwrap().label == g.unwrap().label {
                        out[1].0 += 1;
                    }
                }
            }
            if let Some(p) = pred {
                out[2].1 += 1;
                out[3].1 += 1;
                if let Some(g) = g {
                    if g.label == p.label {
                        out[2].0 += 1;
                        if g.rationale_sets.iter().any(|set| set.iter().all(|s| p.sentences.contains(s))) {
                            out[3].0 += 1;
                        }
                    }
                }
            }
            if g.is_some() {
                out[2].2 += 1;
                out[3].2 += 1;
            }
        }
    }
    out
}

pub fn prf(tp: usize, predicted: usize, gold: usize) -> (f64, f64, f64) {
    let p = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
    let r = if gold == 0 { 0.0 } else { tp as f64 / gold as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}
