//! Built-in correctness suites run by the `selftest` command.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{ClaimInstance, Origin, Stance};
use crate::encoder::{EncoderConfig, Positional};
use crate::error::Result;
use crate::evaluation::{
    abstract_level_f1, postprocess, sentence_level_f1, GoldPair, GoldSet, Prediction, Prf,
};
use crate::gradcheck::{check_model, GradCheckOptions};
use crate::heads::KgatConfig;
use crate::model::{JointModel, ModelConfig, StanceHeadKind};
use crate::tokenizer::Tokenizer;

pub const FIXTURE_WORDS: [&str; 8] = ["cell", "gene", "mouse", "tumor", "dose", "risk", "blood", "brain"];

/// Small double-precision model for gradient checks.
pub fn fixture_model(head: StanceHeadKind, seed: u64) -> Result<JointModel<f64>> {
    let tokenizer = Tokenizer::from_words(FIXTURE_WORDS.iter().map(|w| w.to_string()).collect(), 4);
    let encoder = EncoderConfig {
        vocab_size: tokenizer.vocab_size(),
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_sequence_length: 16,
        positional: Positional::Learned,
        layer_norm_eps: 1e-5,
    };
    let mut config = ModelConfig::new(encoder, head);
    config.kgat = KgatConfig::with_kernels(5);
    JointModel::new(config, tokenizer, seed)
}

/// Instance whose packed sequence has exactly 8 tokens:
/// `[CLS] w w [SEP] @ [SEP] w [SEP]`.
pub fn fixture_instance(rng: &mut impl Rng) -> ClaimInstance {
    let mut word = || FIXTURE_WORDS[rng.gen_range(0..FIXTURE_WORDS.len())].to_string();
    let claim = format!("{} {}", word(), word());
    let sentence = word();
    let rationale = rng.gen_bool(0.5);
    let stance = if rationale {
        if rng.gen_bool(0.5) {
            Stance::Supports
        } else {
            Stance::Refutes
        }
    } else {
        Stance::NoInfo
    };
    ClaimInstance {
        claim_id: 0,
        claim,
        doc_id: 0,
        sentences: vec![sentence],
        rationale_mask: vec![rationale],
        rationale_sets: if rationale { vec![vec![0]] } else { Vec::new() },
        stance,
        origin: Origin::Gold,
    }
}

/// Random predictions and gold over at most 5 claims, 4 docs and 6 sentences.
pub fn random_metric_fixture(rng: &mut impl Rng) -> (Vec<Prediction>, GoldSet) {
    let n_claims = rng.gen_range(1..=5u64);
    let n_docs = rng.gen_range(1..=4u64);
    let n_sents = rng.gen_range(1..=6usize);
    let mut gold = GoldSet::default();
    let mut preds = Vec::new();
    let random_set = |rng: &mut dyn rand::RngCore| -> BTreeSet<usize> {
        (0..n_sents).filter(|_| rng.gen_bool(0.35)).collect()
    };
    for c in 0..n_claims {
        for d in 0..n_docs {
            if rng.gen_bool(0.4) {
                let n_sets = rng.gen_range(1..=2);
                let sets: Vec<BTreeSet<usize>> = (0..n_sets)
                    .map(|_| {
                        let mut s = random_set(rng);
                        if s.is_empty() {
                            s.insert(rng.gen_range(0..n_sents));
                        }
                        s
                    })
                    .collect();
                let label = if rng.gen_bool(0.5) { Stance::Supports } else { Stance::Refutes };
                gold.pairs.insert((c, d), GoldPair { label, rationale_sets: sets });
            }
            if rng.gen_bool(0.6) {
                preds.push(Prediction {
                    claim_id: c,
                    doc_id: d,
                    sentences: random_set(rng),
                    label: Stance::from_index(rng.gen_range(0..3)),
                });
            }
        }
    }
    (postprocess(&preds), gold)
}

/// Enumerates every (claim, doc, sentence) triple and recounts all four metrics.
pub fn brute_force_metrics(preds: &[Prediction], gold: &GoldSet) -> [Prf; 4] {
    let max_claim = preds.iter().map(|p| p.claim_id).chain(gold.pairs.keys().map(|k| k.0)).max().unwrap_or(0);
    let max_doc = preds.iter().map(|p| p.doc_id).chain(gold.pairs.keys().map(|k| k.1)).max().unwrap_or(0);
    let max_sent = preds
        .iter()
        .flat_map(|p| p.sentences.iter().copied())
        .chain(gold.pairs.values().flat_map(|g| g.rationale_sets.iter().flatten().copied()))
        .max()
        .unwrap_or(0);
    let by_pair: BTreeMap<(u64, u64), &Prediction> = preds.iter().map(|p| ((p.claim_id, p.doc_id), p)).collect();
    let (mut s_pred, mut s_gold, mut s_tp, mut s_tp_label) = (0, 0, 0, 0);
    let (mut a_pred, mut a_tp, mut a_tp_rat) = (0, 0, 0);
    for c in 0..=max_claim {
        for d in 0..=max_doc {
            let p = by_pair.get(&(c, d)).filter(|p| p.label != Stance::NoInfo);
            let g = gold.pairs.get(&(c, d));
            for s in 0..=max_sent {
                let predicted = p.is_some_and(|p| p.sentences.contains(&s));
                let in_gold = g.is_some_and(|g| g.rationale_sets.iter().any(|set| set.contains(&s)));
                s_pred += usize::from(predicted);
                s_gold += usize::from(in_gold);
                if predicted && in_gold {
                    s_tp += 1;
                    if p.map(|p| p.label) == g.map(|g| g.label) {
                        s_tp_label += 1;
                    }
                }
            }
            if let Some(p) = p {
                a_pred += 1;
                if let Some(g) = g.filter(|g| g.label == p.label) {
                    a_tp += 1;
                    if g.rationale_sets.iter().any(|set| set.iter().all(|s| p.sentences.contains(s))) {
                        a_tp_rat += 1;
                    }
                }
            }
        }
    }
    let a_gold = gold.pairs.len();
    [
        Prf::from_counts(s_tp, s_pred, s_gold),
        Prf::from_counts(s_tp_label, s_pred, s_gold),
        Prf::from_counts(a_tp, a_pred, a_gold),
        Prf::from_counts(a_tp_rat, a_pred, a_gold),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Gradient checks for both stance heads and the metric oracle.
pub fn run_selftest(seed: u64) -> Vec<CheckResult> {
    let mut results = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for head in [StanceHeadKind::Simple, StanceHeadKind::Kgat] {
        let name = format!("gradient check ({head:?} head)").to_lowercase();
        let outcome = (|| -> Result<f64> {
            let mut worst: f64 = 0.0;
            for i in 0..3 {
                let model = fixture_model(head, seed + i)?;
                let inst = fixture_instance(&mut rng);
                let report = check_model(&model, &inst, 6.0, GradCheckOptions::default(), None)?;
                worst = worst.max(report.max_rel_error);
            }
            Ok(worst)
        })();
        results.push(match outcome {
            Ok(err) => CheckResult {
                name,
                passed: err < 1e-4,
                detail: format!("max relative error {err:.3e}"),
            },
            Err(e) => CheckResult {
                name,
                passed: false,
                detail: e.to_string(),
            },
        });
    }
    let mut mismatches = 0;
    for _ in 0..200 {
        let (preds, gold) = random_metric_fixture(&mut rng);
        let expected = brute_force_metrics(&preds, &gold);
        let got = [
            sentence_level_f1(&preds, &gold, false),
            sentence_level_f1(&preds, &gold, true),
            abstract_level_f1(&preds, &gold, false),
            abstract_level_f1(&preds, &gold, true),
        ];
        if got != expected {
            mismatches += 1;
        }
    }
    results.push(CheckResult {
        name: "metric oracle".into(),
        passed: mismatches == 0,
        detail: format!("{mismatches} of 200 fixtures disagree"),
    });
    results
}
