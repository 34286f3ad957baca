mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{brute_force_counts, prf, random_fixture};
use parajoint::data::Stance;
use parajoint::evaluation::{
    abstract_level_f1, evaluate, retrieval_metrics, sentence_level_f1, EvalOptions, GoldPair, GoldSet, Prediction, Prf,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn close(a: &Prf, (p, r, f): (f64, f64, f64)) -> bool {
    (a.precision - p).abs() < 1e-12 && (a.recall - r).abs() < 1e-12 && (a.f1 - f).abs() < 1e-12
}

fn pred(claim: u64, doc: u64, sentences: &[usize], label: Stance) -> Prediction {
    Prediction {
        claim_id: claim,
        doc_id: doc,
        sentences: sentences.iter().copied().collect(),
        label,
    }
}

proptest! {
    #[test]
    fn metrics_match_brute_force(seed in any::<u64>()) {
        let (preds, gold) = random_fixture(&mut ChaCha8Rng::seed_from_u64(seed));
        let report = evaluate(&preds, &gold, EvalOptions::default());
        let counts = brute_force_counts(&preds, &gold);
        let got = [
            report.sentence_selection_only,
            report.sentence_selection_label,
            report.abstract_label_only,
            report.abstract_label_rationale,
        ];
        for (g, &(tp, p, n)) in got.iter().zip(&counts) {
            prop_assert!(close(g, prf(tp, p, n)), "{g:?} vs {:?}", (tp, p, n));
        }
    }

    #[test]
    fn stricter_metrics_never_exceed_looser(seed in any::<u64>()) {
        let (preds, gold) = random_fixture(&mut ChaCha8Rng::seed_from_u64(seed));
        let r = evaluate(&preds, &gold, EvalOptions::default());
        prop_assert!(r.sentence_selection_label.precision <= r.sentence_selection_only.precision);
        prop_assert!(r.sentence_selection_label.recall <= r.sentence_selection_only.recall);
        prop_assert!(r.abstract_label_rationale.precision <= r.abstract_label_only.precision);
        prop_assert!(r.abstract_label_rationale.recall <= r.abstract_label_only.recall);
        for m in [r.sentence_selection_only, r.sentence_selection_label, r.abstract_label_only, r.abstract_label_rationale] {
            prop_assert!((0.0..=1.0).contains(&m.f1));
        }
    }

    #[test]
    fn noinfo_predictions_and_order_do_not_matter(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut preds, gold) = random_fixture(&mut rng);
        let base = evaluate(&preds, &gold, EvalOptions::default());
        preds.reverse();
        preds.push(pred(99, 99, &[0, 1], Stance::NoInfo));
        prop_assert_eq!(evaluate(&preds, &gold, EvalOptions::default()), base);
    }

    #[test]
    fn cap_keeps_only_lowest_sentences(seed in any::<u64>(), cap in 1usize..4) {
        let (preds, gold) = random_fixture(&mut ChaCha8Rng::seed_from_u64(seed));
        let capped: Vec<Prediction> = preds
            .iter()
            .map(|p| Prediction { sentences: p.sentences.iter().copied().take(cap).collect(), ..p.clone() })
            .collect();
        let opts = EvalOptions { max_sentences: Some(cap) };
        prop_assert_eq!(evaluate(&preds, &gold, opts), evaluate(&capped, &gold, EvalOptions::default()));
    }
}

#[test]
fn worked_example() {
    let mut gold = GoldSet::default();
    gold.pairs.insert(
        (1, 10),
        GoldPair {
            label: Stance::Supports,
            rationale_sets: vec![[0, 1].into(), [4].into()],
        },
    );
    gold.pairs.insert(
        (2, 20),
        GoldPair {
            label: Stance::Refutes,
            rationale_sets: vec![[2].into()],
        },
    );
    let preds = vec![
        pred(1, 10, &[0, 1, 3], Stance::Supports),
        pred(2, 20, &[2], Stance::Supports),
        pred(2, 21, &[0], Stance::Refutes),
        pred(3, 30, &[], Stance::Refutes),
    ];
    // sentences: predicted 5, gold 4, hits {0,1} and {2}
    assert!(close(&sentence_level_f1(&preds, &gold, false), prf(3, 5, 4)));
    assert!(close(&sentence_level_f1(&preds, &gold, true), prf(2, 5, 4)));
    let report = evaluate(&preds, &gold, EvalOptions::default());
    // the empty prediction becomes NOINFO and drops out
    assert!(close(&report.abstract_label_only, prf(1, 3, 2)));
    assert!(close(&report.abstract_label_rationale, prf(1, 3, 2)));
    assert!(close(&abstract_level_f1(&preds[..1], &gold, true), prf(1, 1, 2)));

    let partial = [pred(1, 10, &[0, 3], Stance::Supports)];
    assert!(close(&abstract_level_f1(&partial, &gold, false), prf(1, 1, 2)));
    assert!(close(&abstract_level_f1(&partial, &gold, true), prf(0, 1, 2)));
}

#[test]
fn empty_inputs_score_zero() {
    let r = evaluate(&[], &GoldSet::default(), EvalOptions::default());
    assert_eq!(r.sentence_selection_only, Prf::from_counts(0, 0, 0));
    assert_eq!(r.sentence_selection_only.f1, 0.0);
}

#[test]
fn retrieval_scores_truncate_to_k() {
    let retrieved: BTreeMap<u64, Vec<u64>> = [(1, vec![5, 6, 7]), (2, vec![8, 9])].into();
    let gold: BTreeMap<u64, BTreeSet<u64>> = [(1, [6, 11].into()), (2, [8].into()), (3, BTreeSet::new())].into();
    assert!(close(&retrieval_metrics(&retrieved, &gold, 3), prf(2, 5, 3)));
    assert!(close(&retrieval_metrics(&retrieved, &gold, 1), prf(1, 2, 3)));
}
