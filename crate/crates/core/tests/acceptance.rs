//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use parajoint::data::{load_claims, load_corpus, Stance};
use parajoint::evaluation::{
    abstract_level_f1, gold_evidence_docs, postprocess, retrieval_metrics, sentence_level_f1, Prediction,
};
use parajoint::gradcheck::{check_model, GradCheckOptions};
use parajoint::heads::SelectionMode;
use parajoint::model::{Domain, StanceHeadKind, Targets};
use parajoint::pipeline::{run_pipeline, PipelineConfig, Task};
use parajoint::retrieval::{Backend, RetrievalIndex, Retriever};
use parajoint::selftest::{fixture_instance, fixture_model};
use parajoint::tape::{Fault, Tape};
use parajoint::training::{
    evaluate_instances, joint_loss, scheduled_sampling_prob, train, train_step, Adam, AdamConfig, TrainConfig,
    TrainData, TrainMode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, bad: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(bad)
    }
}

fn within_budget(start: Instant, budget: Duration) -> Result<(), String> {
    let spent = start.elapsed();
    if spent < budget {
        Ok(())
    } else {
        Err(format!("runtime {spent:.1?} exceeds {budget:?}"))
    }
}

fn scifact_dir() -> PathBuf {
    std::env::var_os("SCIFACT_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/scifact"))
}

fn retrieval_reproduction() -> Outcome {
    let start = Instant::now();
    let dir = scifact_dir();
    let corpus = load_corpus(dir.join("corpus.jsonl"))
        .map_err(|e| format!("SciFact corpus unavailable ({e}); set SCIFACT_DATA_DIR"))?;
    let claims = load_claims(dir.join("claims_dev.jsonl")).map_err(|e| format!("SciFact dev claims: {e}"))?;
    let index = RetrievalIndex::build(&corpus, Backend::Tfidf, None).map_err(|e| e.to_string())?;
    let ranked: BTreeMap<u64, Vec<u64>> = claims
        .iter()
        .map(|c| (c.id, index.retrieve(&c.text, 100).into_iter().map(|r| r.doc_id).collect()))
        .collect();
    let gold = gold_evidence_docs(&claims);
    let mut parts = Vec::new();
    let mut ok = true;
    for (k, target) in [(3, 69.9), (10, 83.6), (100, 96.7)] {
        let recall = 100.0 * retrieval_metrics(&ranked, &gold, k).recall;
        ok &= (recall - target).abs() <= 2.0;
        parts.push(format!("R@{k}={recall:.1} (target {target})"));
    }
    within_budget(start, Duration::from_secs(120))?;
    check(ok, parts.join(", "), parts.join(", "))
}

fn scheduled_sampling() -> Outcome {
    let first = scheduled_sampling_prob(1, 11).map_err(|e| e.to_string())?;
    let last = scheduled_sampling_prob(11, 11).map_err(|e| e.to_string())?;
    let mid = scheduled_sampling_prob(6, 11).map_err(|e| e.to_string())?;
    let expected = std::f64::consts::FRAC_1_SQRT_2;
    let mut ok = first.abs() <= 1e-12 && (last - 1.0).abs() <= 1e-12 && (mid - expected).abs() <= 1e-12;
    for total in [3, 5, 7, 21, 101] {
        let m = scheduled_sampling_prob(total / 2 + 1, total).map_err(|e| e.to_string())?;
        ok &= (m - expected).abs() <= 1e-12;
    }
    let msg = format!("p(1)={first}, p(6/11)={mid:.13}, p(11)={last}");
    check(ok, msg.clone(), msg)
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-6.0..6.0)).collect();
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    logits.iter().map(|l| l.exp() / z).collect()
}

fn joint_loss_decomposition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..12);
        let probs: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let d = random_distribution(&mut rng, 2);
                (d[0], d[1])
            })
            .collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        mask[0] = false;
        let s = random_distribution(&mut rng, 3);
        let gamma = rng.gen_range(1e-3..20.0);
        let l = joint_loss(&probs, &mask, &[s[0], s[1], s[2]], Stance::from_index(rng.gen_range(0..3)), gamma);
        worst = worst.max((l.total - (gamma * l.rationale + l.stance)).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..50 {
        let head = if i % 2 == 0 { StanceHeadKind::Simple } else { StanceHeadKind::Kgat };
        let model = fixture_model(head, i).map_err(|e| e.to_string())?;
        let inst = fixture_instance(&mut rng);
        let seq = model.sequence(&inst.claim, &inst.sentences).map_err(|e| e.to_string())?;
        let mask = [false, inst.rationale_mask[0]];
        let gamma = rng.gen_range(1e-3..20.0);
        let targets = Targets {
            rationale_mask: &mask,
            stance: inst.stance,
            gamma,
        };
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &seq, Domain::Scifact, SelectionMode::Gold(&mask), Some(targets), None);
        let loss = fwd.loss.expect("targets");
        let (r, s, t) = (
            tape.value(loss.rationale).item(),
            tape.value(loss.stance).item(),
            tape.value(loss.total).item(),
        );
        worst = worst.max((t - (gamma * r + s)).abs());
    }
    check(
        worst == 0.0,
        "1000 probability inputs + 50 model forwards: residual exactly 0".into(),
        format!("max residual {worst:e}"),
    )
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut parts = Vec::new();
    let mut ok = true;
    for head in [StanceHeadKind::Simple, StanceHeadKind::Kgat] {
        let mut worst: f64 = 0.0;
        let mut entries = 0;
        for seed in 0..4 {
            let model = fixture_model(head, 100 + seed).map_err(|e| e.to_string())?;
            let inst = fixture_instance(&mut rng);
            let seq = model.sequence(&inst.claim, &inst.sentences).map_err(|e| e.to_string())?;
            assert!(seq.len() <= 8);
            let report = check_model(&model, &inst, 6.0, GradCheckOptions { seed, ..Default::default() }, None)
                .map_err(|e| e.to_string())?;
            worst = worst.max(report.max_rel_error);
            entries += report.entries_checked;
        }
        let model = fixture_model(head, 7).map_err(|e| e.to_string())?;
        let inst = fixture_instance(&mut rng);
        let faulty = check_model(&model, &inst, 6.0, GradCheckOptions::default(), Some(Fault::SoftmaxBackward))
            .map_err(|e| e.to_string())?;
        ok &= worst < 1e-4 && faulty.max_rel_error > 1e-2;
        parts.push(format!(
            "{head:?}: max rel err {worst:.2e} over {entries} entries (injected fault: {:.2e})",
            faulty.max_rel_error
        ));
    }
    within_budget(start, Duration::from_secs(60))?;
    check(ok, parts.join("; "), parts.join("; "))
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..200 {
        let (preds, gold) = common::random_fixture(&mut rng);
        let preds = postprocess(&preds);
        let counts = common::brute_force_counts(&preds, &gold);
        let got = [
            sentence_level_f1(&preds, &gold, false),
            sentence_level_f1(&preds, &gold, true),
            abstract_level_f1(&preds, &gold, false),
            abstract_level_f1(&preds, &gold, true),
        ];
        for (g, &(tp, p, n)) in got.iter().zip(&counts) {
            if (g.precision, g.recall, g.f1) != common::prf(tp, p, n) {
                mismatches += 1;
            }
        }
    }
    check(
        mismatches == 0,
        "4 variants x 200 fixtures agree exactly".into(),
        format!("{mismatches} metric mismatches"),
    )
}

fn postprocess_totality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut total = 0;
    let mut violations = 0;
    let mut not_idempotent = 0;
    for _ in 0..1000 {
        let preds: Vec<Prediction> = (0..rng.gen_range(0..20))
            .map(|i| Prediction {
                claim_id: i,
                doc_id: rng.gen_range(0..5),
                sentences: (0..6).filter(|_| rng.gen_bool(0.2)).collect::<BTreeSet<_>>(),
                label: Stance::from_index(rng.gen_range(0..3)),
            })
            .collect();
        let once = postprocess(&preds);
        total += once.len();
        violations += once.iter().filter(|p| p.sentences.is_empty() && p.label != Stance::NoInfo).count();
        not_idempotent += usize::from(postprocess(&once) != once);
    }
    check(
        violations == 0 && not_idempotent == 0,
        format!("{total} predictions satisfy the rule; idempotent on 1000 sets"),
        format!("{violations} violations, {not_idempotent} non-idempotent sets"),
    )
}

fn overfit_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let instances = common::planted_instances(20, &mut rng);
    let config = TrainConfig {
        total_epochs: 30,
        learning_rate: 2e-3,
        encoder_learning_rate: 2e-3,
        ..TrainConfig::default()
    };
    let model = config.init_model::<f64>(&[&instances]).map_err(|e| e.to_string())?;
    let data = TrainData {
        train: &instances,
        dev: &instances,
        ..Default::default()
    };
    let outcome = train(&config, data, model).map_err(|e| e.to_string())?;
    let report = evaluate_instances(&outcome.model, &instances, Domain::Scifact);
    let f1 = report.sentence_selection_label.f1;
    within_budget(start, Duration::from_secs(300))?;
    check(
        f1 == 1.0,
        format!("train sentence Selection+Label F1 = {:.1}% after 30 epochs", 100.0 * f1),
        format!("train sentence Selection+Label F1 = {:.1}%", 100.0 * f1),
    )
}

fn dummy_behavior() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures = Vec::new();
    for i in 0..500u64 {
        let head = if i % 2 == 0 { StanceHeadKind::Simple } else { StanceHeadKind::Kgat };
        let mut model = common::small_model(head, 8, i);
        // Rationale head that rejects every sentence.
        let w2 = model.store.expect_id("scifact.rationale.w2");
        let b2 = model.store.expect_id("scifact.rationale.b2");
        model.store.get_mut(w2).data_mut().iter_mut().for_each(|x| *x = 0.0);
        let margin = rng.gen_range(0.01..5.0);
        model.store.get_mut(b2).data_mut().copy_from_slice(&[margin, -margin]);

        let pool = common::planted_instances(5, &mut rng);
        let inst = &pool[i as usize % 5];
        let seq = model.sequence(&inst.claim, &inst.sentences).map_err(|e| e.to_string())?;
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &seq, Domain::Scifact, SelectionMode::Predicted, None, None);
        let dummy_rows = match head {
            StanceHeadKind::Simple => tape.value(fwd.sent_reps).slice_rows(0, 1),
            StanceHeadKind::Kgat => {
                let (s, e) = seq.sentence_spans()[0];
                tape.value(fwd.token_reps).slice_rows(s, e)
            }
        };
        if fwd.stance_inputs != vec![0] || fwd.stance_input_rows != dummy_rows {
            failures.push(format!("fixture {i}: stance head input is not the dummy"));
            continue;
        }
        let (claims, corpus) = common::claims_and_corpus(std::slice::from_ref(inst));
        let config = PipelineConfig {
            task: Task::Oracle,
            k_retrieval: 30,
        };
        let result = run_pipeline(&config, &claims, &corpus, &model, None).map_err(|e| e.to_string())?;
        if result.predictions.len() != 1 || result.predictions.iter().any(|p| p.label != Stance::NoInfo) {
            failures.push(format!("fixture {i}: pipeline did not emit NOINFO"));
        }
    }
    check(
        failures.is_empty(),
        "500/500 fixtures route the dummy alone and emit NOINFO".into(),
        format!("{} failures, first: {}", failures.len(), failures.first().cloned().unwrap_or_default()),
    )
}

fn domain_isolation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let scifact = common::planted_instances(10, &mut rng);
    let fever = common::planted_instances(10, &mut rng);
    let config = TrainConfig {
        mode: TrainMode::DomainAdaptation,
        learning_rate: 1e-3,
        encoder_learning_rate: 1e-3,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        ..TrainConfig::default()
    };
    let mut model = config
        .init_model::<f64>(&[&scifact, &fever])
        .map_err(|e| e.to_string())?;
    let mut adam = Adam::new(AdamConfig::default());
    let hash = |m: &parajoint::JointModelF64, prefix: &str| m.store.hash_where(|n| n.starts_with(prefix));
    let mut ok = true;
    let mut steps = 0;
    for round in 0..5 {
        for (batch, domain, frozen, moving) in [
            (&fever[round..round + 2], Domain::Fever, "scifact.", "fever."),
            (&scifact[round..round + 2], Domain::Scifact, "fever.", "scifact."),
        ] {
            let before_frozen = hash(&model, frozen);
            let before_moving = hash(&model, moving);
            let before_encoder = hash(&model, "encoder.");
            train_step(&mut model, &mut adam, &config, batch, domain, 0.5, round as u64).map_err(|e| e.to_string())?;
            ok &= hash(&model, frozen) == before_frozen;
            ok &= hash(&model, moving) != before_moving;
            ok &= hash(&model, "encoder.") != before_encoder;
            steps += 1;
        }
    }
    check(
        ok,
        format!("{steps} alternating steps: other domain's heads bit-identical, own heads and encoder updated"),
        "a step changed the other domain's head parameters (or failed to update its own)".into(),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("retrieval reproduction (TF-IDF recall on SciFact dev)", retrieval_reproduction),
        ("scheduled sampling exactness", scheduled_sampling),
        ("joint-loss decomposition", joint_loss_decomposition),
        ("gradient correctness (both stance heads)", gradient_correctness),
        ("metric oracle equivalence", metric_oracle),
        ("post-processing totality and idempotence", postprocess_totality),
        ("overfit oracle", overfit_oracle),
        ("dummy-sentence behavior", dummy_behavior),
        ("domain-adaptation isolation", domain_isolation),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let label = format!("{} {name}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(msg) => println!("[PASS] criterion {label}: {msg} ({secs:.1}s)"),
            Err(msg) => {
                failed += 1;
                println!("[FAIL] criterion {label}: {msg} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
