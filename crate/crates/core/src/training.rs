//! Joint optimization of the rationale and stance objectives.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Lineage};
use crate::data::{downsample_sentences, ClaimInstance, Stance};
use crate::encoder::{EncoderConfig, Positional, TokenSequence, ENCODER_PREFIX};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalOptions, GoldSet, MetricsReport, Prediction};
use crate::heads::{KgatConfig, SelectionMode};
use crate::model::{Domain, JointModel, ModelConfig, StanceHeadKind, Targets};
use crate::params::{Gradients, ParamGrad, ParamId, ParamStore};
use crate::retrieval::Backend;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    ScifactOnly,
    FeverPretrainThenFinetune,
    DomainAdaptation,
}

/// Training hyper-parameters. Serialized as a flat JSON object; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub k_retrieval: usize,
    pub k_train: usize,
    pub k_fever: usize,
    pub learning_rate: f64,
    pub encoder_learning_rate: f64,
    pub batch_size: usize,
    pub total_epochs: usize,
    /// FEVER epochs before fine-tuning; defaults to `total_epochs`.
    pub pretrain_epochs: Option<usize>,
    pub dropout: f64,
    pub kgat_dropout: f64,
    pub kgat_weight_decay: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub stance_head: StanceHeadKind,
    pub n_kernels: usize,
    /// Add one sentence-down-sampled copy of every positive instance per epoch.
    pub downsample: bool,
    pub p_drop: f64,
    pub retrieval_backend: Backend,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_sequence_length: usize,
    pub positional: Positional,
    pub vocab_min_count: usize,
    pub vocab_max_words: usize,
    pub hash_buckets: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 6.0,
            k_retrieval: 30,
            k_train: 12,
            k_fever: 5,
            learning_rate: 5e-6,
            encoder_learning_rate: 1e-5,
            batch_size: 1,
            total_epochs: 20,
            pretrain_epochs: None,
            dropout: 0.0,
            kgat_dropout: 0.0,
            kgat_weight_decay: 0.0,
            seed: 42,
            mode: TrainMode::ScifactOnly,
            stance_head: StanceHeadKind::Simple,
            n_kernels: 21,
            downsample: true,
            p_drop: 0.3,
            retrieval_backend: Backend::Tfidf,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_sequence_length: 512,
            positional: Positional::Learned,
            vocab_min_count: 1,
            vocab_max_words: 20_000,
            hash_buckets: 1024,
        }
    }
}

/// False for NaN as well as non-positive values.
fn positive(x: f64) -> bool {
    x > 0.0
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !positive(self.gamma) {
            return bad(format!("gamma must be > 0, got {}", self.gamma));
        }
        if self.total_epochs < 2 {
            return bad(format!("total_epochs must be >= 2, got {}", self.total_epochs));
        }
        if self.pretrain_epochs.is_some_and(|e| e < 2) {
            return bad("pretrain_epochs must be >= 2".into());
        }
        if !positive(self.learning_rate) || !positive(self.encoder_learning_rate) {
            return bad("learning rates must be > 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        for (name, p) in [("dropout", self.dropout), ("kgat_dropout", self.kgat_dropout), ("p_drop", self.p_drop)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !positive(self.adam_eps) {
            return bad("invalid Adam moment settings".into());
        }
        if self.kgat_weight_decay < 0.0 {
            return bad("kgat_weight_decay must be >= 0".into());
        }
        self.encoder_config(1).validate()?;
        if self.stance_head == StanceHeadKind::Kgat && self.n_kernels < 2 {
            return bad("n_kernels must be >= 2".into());
        }
        Ok(())
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_sequence_length: self.max_sequence_length,
            positional: self.positional,
            layer_norm_eps: 1e-5,
        }
    }

    /// Model layout implied by this config; domain adaptation gets a FEVER head set.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let mut m = ModelConfig::new(self.encoder_config(vocab_size), self.stance_head);
        m.kgat = KgatConfig::with_kernels(self.n_kernels.max(2));
        m.dropout = self.dropout;
        m.kgat_dropout = self.kgat_dropout;
        if self.mode == TrainMode::DomainAdaptation {
            m.domains = vec![Domain::Scifact, Domain::Fever];
        }
        m
    }

    /// Fresh model with a vocabulary built from the instance texts.
    pub fn init_model<T: Scalar>(&self, instances: &[&[ClaimInstance]]) -> Result<JointModel<T>> {
        let texts = instances
            .iter()
            .flat_map(|set| set.iter())
            .flat_map(|i| std::iter::once(i.claim.as_str()).chain(i.sentences.iter().map(String::as_str)));
        let tokenizer = Tokenizer::build(texts, self.vocab_min_count, self.vocab_max_words, self.hash_buckets);
        JointModel::new(self.model_config(tokenizer.vocab_size()), tokenizer, self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_rationale")]
    pub rationale: f64,
    #[serde(rename = "L_stance")]
    pub stance: f64,
    #[serde(rename = "L_total")]
    pub total: f64,
}

const PROB_FLOOR: f64 = 1e-12;

fn neg_log(p: f64) -> f64 {
    if p < PROB_FLOOR {
        log::warn!("probability {p} at a gold index clamped to {PROB_FLOOR}");
    }
    -p.max(PROB_FLOOR).ln()
}

/// Joint objective from probabilities. `rationale_probs[i]` is
/// `(p_not_r, p_r)` for sentence `i`, dummy included.
pub fn joint_loss(
    rationale_probs: &[(f64, f64)],
    gold_mask: &[bool],
    stance_probs: &[f64; 3],
    gold_stance: Stance,
    gamma: f64,
) -> LossBreakdown {
    assert_eq!(rationale_probs.len(), gold_mask.len(), "mask length differs from sentence count");
    assert!(!gold_mask.is_empty(), "no sentences");
    let sum: f64 = rationale_probs
        .iter()
        .zip(gold_mask)
        .map(|(&(p0, p1), &g)| neg_log(if g { p1 } else { p0 }))
        .sum();
    let rationale = sum / gold_mask.len() as f64;
    let stance = neg_log(stance_probs[gold_stance.index()]);
    LossBreakdown {
        rationale,
        stance,
        total: gamma * rationale + stance,
    }
}

/// Probability of feeding predicted rationales at `current_epoch` (1-based).
pub fn scheduled_sampling_prob(current_epoch: usize, total_epochs: usize) -> Result<f64> {
    if total_epochs < 2 {
        return Err(Error::Config(format!("total_epochs must be >= 2, got {total_epochs}")));
    }
    if current_epoch == 0 || current_epoch > total_epochs {
        return Err(Error::Config(format!("epoch {current_epoch} outside 1..={total_epochs}")));
    }
    let progress = (current_epoch - 1) as f64 / (total_epochs - 1) as f64;
    Ok((FRAC_PI_2 * progress).sin())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RationaleSource {
    Predicted,
    Gold,
}

pub fn choose_rationale_source<R: Rng + ?Sized>(p_sample: f64, rng: &mut R) -> RationaleSource {
    assert!((0.0..=1.0).contains(&p_sample), "p_sample {p_sample} outside [0, 1]");
    if rng.gen::<f64>() < p_sample {
        RationaleSource::Predicted
    } else {
        RationaleSource::Gold
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
    t: i32,
}

/// Adam with lazy updates: only parameters (and embedding rows) present in a
/// gradient are touched, so heads outside the computation stay bit-identical.
pub struct Adam<T> {
    config: AdamConfig,
    state: BTreeMap<ParamId, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update. `lr` and `weight_decay` map parameter names to
    /// their group settings.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &Gradients<T>,
        lr: impl Fn(&str) -> f64,
        weight_decay: impl Fn(&str) -> f64,
    ) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
        for (id, grad) in grads.iter() {
            let name = store.name(id).to_owned();
            let lr = lr(&name);
            let wd = T::lit(weight_decay(&name));
            let value = store.get_mut(id);
            let (rows, cols) = value.shape();
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: Tensor::zeros(rows, cols),
                v: Tensor::zeros(rows, cols),
                t: 0,
            });
            st.t += 1;
            let step = T::lit(lr * (1.0 - beta2.powi(st.t)).sqrt() / (1.0 - beta1.powi(st.t)));
            let mut update = |i: usize, g: T, value: &mut Tensor<T>| {
                let g = g + wd * value.data()[i];
                let m = &mut st.m.data_mut()[i];
                *m = b1 * *m + (T::one() - b1) * g;
                let m = *m;
                let v = &mut st.v.data_mut()[i];
                *v = b2 * *v + (T::one() - b2) * g * g;
                let v = *v;
                value.data_mut()[i] -= step * m / (v.sqrt() + eps);
            };
            match grad {
                ParamGrad::Dense(g) => {
                    for (i, &gi) in g.data().iter().enumerate() {
                        update(i, gi, value);
                    }
                }
                ParamGrad::Rows(map) => {
                    for (&r, row) in map {
                        for (c, &gi) in row.iter().enumerate() {
                            update(r * cols + c, gi, value);
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Pretrain,
    Finetune,
}

impl Phase {
    fn as_str(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    #[serde(rename = "L_rationale")]
    pub l_rationale: f64,
    #[serde(rename = "L_stance")]
    pub l_stance: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub p_sample: f64,
    pub instances: usize,
    pub dev: Option<MetricsReport>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("non-finite loss in {phase:?} epoch {epoch} (claim {claim_id}, doc {doc_id}); last good checkpoint retained")]
    NonFinite {
        phase: Phase,
        epoch: usize,
        claim_id: u64,
        doc_id: u64,
        last_good: Box<Checkpoint>,
    },
}

pub struct TrainOutcome<T: Scalar> {
    /// Best model by dev sentence-level Selection+Label F1.
    pub model: JointModel<T>,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Instance sets for one run. `fever` is used by the pre-training and
/// domain-adaptation modes. `parent` marks a model loaded from a checkpoint.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainData<'a> {
    pub train: &'a [ClaimInstance],
    pub dev: &'a [ClaimInstance],
    pub fever: &'a [ClaimInstance],
    pub parent: Option<&'a str>,
}

/// Rationale mask over every sentence span of `seq`, dummy first.
pub fn span_mask(inst: &ClaimInstance, seq: &TokenSequence) -> Vec<bool> {
    let mut mask = Vec::with_capacity(seq.num_sentence_spans());
    if seq.has_dummy {
        mask.push(false);
    }
    mask.extend_from_slice(&inst.rationale_mask[..seq.num_real_sentences()]);
    mask
}

/// Dev-set predictions in evaluation mode, post-processing applied by `evaluate`.
pub fn predict_instances<T: Scalar>(model: &JointModel<T>, instances: &[ClaimInstance], domain: Domain) -> Vec<Prediction> {
    instances
        .par_iter()
        .filter_map(|i| match model.predict(i.claim_id, &i.claim, i.doc_id, &i.sentences, domain) {
            Ok(out) => Some(Prediction::from_output(&out)),
            Err(e) => {
                log::warn!("claim {} doc {}: {e}", i.claim_id, i.doc_id);
                None
            }
        })
        .collect()
}

pub fn evaluate_instances<T: Scalar>(model: &JointModel<T>, instances: &[ClaimInstance], domain: Domain) -> MetricsReport {
    let preds = predict_instances(model, instances, domain);
    evaluate(&preds, &GoldSet::from_instances(instances), EvalOptions::default())
}

struct Trainer<'a, T: Scalar> {
    config: &'a TrainConfig,
    model: JointModel<T>,
    adam: Adam<T>,
    rng: ChaCha8Rng,
    lineage: Lineage,
    last_good: ParamStore<T>,
}

#[derive(Default)]
struct LossSums {
    rationale: f64,
    stance: f64,
    total: f64,
    count: usize,
}

impl LossSums {
    fn add(&mut self, l: LossBreakdown) {
        self.rationale += l.rationale;
        self.stance += l.stance;
        self.total += l.total;
        self.count += 1;
    }

    fn mean(&self) -> (f64, f64, f64) {
        let n = self.count.max(1) as f64;
        (self.rationale / n, self.stance / n, self.total / n)
    }
}

impl<'a, T: Scalar> Trainer<'a, T> {
    fn new(config: &'a TrainConfig, model: JointModel<T>, lineage: Lineage) -> Self {
        let last_good = model.store.clone();
        Self {
            config,
            model,
            adam: Self::fresh_adam(config),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            lineage,
            last_good,
        }
    }

    fn fresh_adam(config: &TrainConfig) -> Adam<T> {
        Adam::new(AdamConfig {
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
        })
    }

    fn checkpoint_of(&self, store: &ParamStore<T>, lineage: Lineage) -> Checkpoint {
        let mut model = self.model.clone();
        model.store = store.clone();
        Checkpoint::from_model(&model, Some(self.config), lineage)
    }

    fn diverged(&self, phase: Phase, epoch: usize, inst: &ClaimInstance) -> TrainError {
        let mut lineage = self.lineage.clone();
        lineage.phase = Some(phase.as_str().into());
        TrainError::NonFinite {
            phase,
            epoch,
            claim_id: inst.claim_id,
            doc_id: inst.doc_id,
            last_good: Box::new(self.checkpoint_of(&self.last_good, lineage)),
        }
    }

    /// Forward and backward for one instance; `None` when it cannot be encoded.
    fn instance_grads(
        &mut self,
        inst: &ClaimInstance,
        domain: Domain,
        p_sample: f64,
    ) -> Option<(LossBreakdown, Gradients<T>)> {
        let seq = match self.model.sequence(&inst.claim, &inst.sentences) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("skipping claim {} doc {}: {e}", inst.claim_id, inst.doc_id);
                return None;
            }
        };
        let mask = span_mask(inst, &seq);
        let source = choose_rationale_source(p_sample, &mut self.rng);
        let mode = match source {
            RationaleSource::Predicted => SelectionMode::Predicted,
            RationaleSource::Gold => SelectionMode::Gold(&mask),
        };
        let targets = Targets {
            rationale_mask: &mask,
            stance: inst.stance,
            gamma: self.config.gamma,
        };
        let mut tape = Tape::new();
        let fwd = self
            .model
            .forward(&mut tape, &seq, domain, mode, Some(targets), Some(&mut self.rng));
        let loss = fwd.loss.expect("targets given");
        let breakdown = LossBreakdown {
            rationale: tape.value(loss.rationale).item().as_f64(),
            stance: tape.value(loss.stance).item().as_f64(),
            total: tape.value(loss.total).item().as_f64(),
        };
        Some((breakdown, tape.backward(loss.total)))
    }

    fn run_batch(
        &mut self,
        batch: &[&ClaimInstance],
        domain: Domain,
        p_sample: f64,
        phase: Phase,
        epoch: usize,
        sums: &mut LossSums,
    ) -> std::result::Result<(), TrainError> {
        let mut total = Gradients::default();
        let mut n = 0;
        for inst in batch {
            let Some((loss, grads)) = self.instance_grads(inst, domain, p_sample) else {
                continue;
            };
            if !loss.total.is_finite() || !grads.is_finite() {
                return Err(self.diverged(phase, epoch, inst));
            }
            sums.add(loss);
            total.merge(grads);
            n += 1;
        }
        if n == 0 {
            return Ok(());
        }
        if n > 1 {
            total.scale(T::lit(1.0 / n as f64));
        }
        let config = self.config;
        self.adam.step(
            &mut self.model.store,
            &total,
            |name| {
                if name.starts_with(ENCODER_PREFIX) {
                    config.encoder_learning_rate
                } else {
                    config.learning_rate
                }
            },
            |name| if name.contains("kgat.") { config.kgat_weight_decay } else { 0.0 },
        );
        Ok(())
    }

    /// Originals plus optional down-sampled copies of positives, shuffled.
    fn epoch_instances(&mut self, instances: &'a [ClaimInstance], augment: bool) -> Vec<std::borrow::Cow<'a, ClaimInstance>> {
        use std::borrow::Cow;
        let mut out: Vec<Cow<'a, ClaimInstance>> = instances.iter().map(Cow::Borrowed).collect();
        if augment && self.config.downsample && self.config.p_drop > 0.0 {
            for inst in instances.iter().filter(|i| i.stance != Stance::NoInfo) {
                out.push(Cow::Owned(downsample_sentences(inst, self.config.p_drop, &mut self.rng)));
            }
        }
        out.shuffle(&mut self.rng);
        out
    }

    /// Epochs over one instance set, optionally interleaved with a second
    /// domain. Returns the best store by dev F1 (or the last one without dev).
    fn run_phase(
        &mut self,
        phase: Phase,
        epochs: usize,
        primary: (&'a [ClaimInstance], Domain),
        secondary: Option<(&'a [ClaimInstance], Domain)>,
        dev: &[ClaimInstance],
        log: &mut Vec<EpochLog>,
    ) -> std::result::Result<(ParamStore<T>, usize), TrainError> {
        let mut best: Option<(f64, ParamStore<T>, usize)> = None;
        let bs = self.config.batch_size;
        let mut secondary_queue: Vec<std::borrow::Cow<'a, ClaimInstance>> = Vec::new();
        for epoch in 1..=epochs {
            let p_sample = scheduled_sampling_prob(epoch, epochs)?;
            let order = self.epoch_instances(primary.0, true);
            let mut sums = LossSums::default();
            for chunk in order.chunks(bs) {
                if let Some((fever, domain)) = secondary {
                    if !fever.is_empty() {
                        let mut batch = Vec::with_capacity(bs);
                        while batch.len() < bs {
                            if secondary_queue.is_empty() {
                                secondary_queue = self.epoch_instances(fever, false);
                            }
                            batch.push(secondary_queue.pop().expect("refilled"));
                        }
                        let refs: Vec<&ClaimInstance> = batch.iter().map(|c| c.as_ref()).collect();
                        let mut discard = LossSums::default();
                        self.run_batch(&refs, domain, p_sample, phase, epoch, &mut discard)?;
                    }
                }
                let refs: Vec<&ClaimInstance> = chunk.iter().map(|c| c.as_ref()).collect();
                self.run_batch(&refs, primary.1, p_sample, phase, epoch, &mut sums)?;
            }
            let (lr, ls, lt) = sums.mean();
            let dev_report = (!dev.is_empty()).then(|| evaluate_instances(&self.model, dev, Domain::Scifact));
            log::info!(
                "{} epoch {epoch}/{epochs}: L_total {lt:.4} (rationale {lr:.4}, stance {ls:.4}), p_sample {p_sample:.3}",
                phase.as_str()
            );
            let score = dev_report.map(|r| r.sentence_selection_label.f1);
            log.push(EpochLog {
                epoch,
                phase,
                l_rationale: lr,
                l_stance: ls,
                l_total: lt,
                p_sample,
                instances: sums.count,
                dev: dev_report,
            });
            let improved = match (&best, score) {
                (None, _) => true,
                (Some(_), None) => true,
                (Some((b, _, _)), Some(s)) => s > *b,
            };
            if improved {
                best = Some((score.unwrap_or(0.0), self.model.store.clone(), epoch));
                self.last_good = self.model.store.clone();
            }
        }
        let (_, store, epoch) = best.expect("at least two epochs");
        Ok((store, epoch))
    }
}

/// Trains `model` per `config.mode`.
///
/// The returned checkpoint holds the epoch with the best dev sentence-level
/// Selection+Label F1 (the final epoch when `dev` is empty).
pub fn train<T: Scalar>(
    config: &TrainConfig,
    data: TrainData<'_>,
    model: JointModel<T>,
) -> std::result::Result<TrainOutcome<T>, TrainError> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("no training instances".into()).into());
    }
    let mut lineage = Lineage {
        mode: Some(config.mode),
        parent_hash: data.parent.map(str::to_owned),
        phase: None,
        epoch: None,
    };
    let mut log = Vec::new();
    let (store, phase, epoch, trainer) = match config.mode {
        TrainMode::ScifactOnly => {
            let mut t = Trainer::new(config, model, lineage.clone());
            let (store, epoch) = t.run_phase(
                Phase::Train,
                config.total_epochs,
                (data.train, Domain::Scifact),
                None,
                data.dev,
                &mut log,
            )?;
            (store, Phase::Train, epoch, t)
        }
        TrainMode::FeverPretrainThenFinetune => {
            let mut model = model;
            if !data.fever.is_empty() {
                let epochs = config.pretrain_epochs.unwrap_or(config.total_epochs);
                let mut t = Trainer::new(config, model, lineage.clone());
                let (store, epoch) =
                    t.run_phase(Phase::Pretrain, epochs, (data.fever, Domain::Scifact), None, &[], &mut log)?;
                let mut pre_lineage = lineage.clone();
                pre_lineage.phase = Some(Phase::Pretrain.as_str().into());
                pre_lineage.epoch = Some(epoch);
                let pretrained = t.checkpoint_of(&store, pre_lineage);
                lineage.parent_hash = Some(pretrained.hash());
                model = t.model;
                model.store = store;
            } else if data.parent.is_none() {
                return Err(Error::Config("fever_pretrain_then_finetune needs FEVER instances or a pretrained checkpoint".into()).into());
            }
            model.reinit_heads(config.seed.wrapping_add(1));
            let mut t = Trainer::new(config, model, lineage.clone());
            let (store, epoch) = t.run_phase(
                Phase::Finetune,
                config.total_epochs,
                (data.train, Domain::Scifact),
                None,
                data.dev,
                &mut log,
            )?;
            (store, Phase::Finetune, epoch, t)
        }
        TrainMode::DomainAdaptation => {
            if model.heads(Domain::Fever).is_none() || model.heads(Domain::Scifact).is_none() {
                return Err(Error::Config("domain adaptation needs SciFact and FEVER head sets".into()).into());
            }
            if data.fever.is_empty() {
                return Err(Error::Config("domain adaptation needs FEVER instances".into()).into());
            }
            let mut t = Trainer::new(config, model, lineage.clone());
            let (store, epoch) = t.run_phase(
                Phase::Train,
                config.total_epochs,
                (data.train, Domain::Scifact),
                Some((data.fever, Domain::Fever)),
                data.dev,
                &mut log,
            )?;
            (store, Phase::Train, epoch, t)
        }
    };
    lineage.phase = Some(phase.as_str().into());
    lineage.epoch = Some(epoch);
    let checkpoint = trainer.checkpoint_of(&store, lineage);
    let mut model = trainer.model;
    model.store = store;
    Ok(TrainOutcome { model, checkpoint, log })
}

/// One optimizer step on a single batch; exposed for isolation checks.
pub fn train_step<T: Scalar>(
    model: &mut JointModel<T>,
    adam: &mut Adam<T>,
    config: &TrainConfig,
    batch: &[ClaimInstance],
    domain: Domain,
    p_sample: f64,
    rng_seed: u64,
) -> std::result::Result<LossBreakdown, TrainError> {
    let mut trainer = Trainer {
        config,
        model: model.clone(),
        adam: std::mem::replace(adam, Adam::new(AdamConfig::default())),
        rng: ChaCha8Rng::seed_from_u64(rng_seed),
        lineage: Lineage::default(),
        last_good: model.store.clone(),
    };
    let refs: Vec<&ClaimInstance> = batch.iter().collect();
    let mut sums = LossSums::default();
    let result = trainer.run_batch(&refs, domain, p_sample, Phase::Train, 1, &mut sums);
    *adam = trainer.adam;
    result?;
    *model = trainer.model;
    let (rationale, stance, total) = sums.mean();
    Ok(LossBreakdown { rationale, stance, total })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_predictions_closed_form() {
        let l = joint_loss(&[(0.5, 0.5); 4], &[false, true, false, true], &[1.0 / 3.0; 3], Stance::Refutes, 6.0);
        assert!((l.stance - 3f64.ln()).abs() < 1e-12);
        assert!((l.rationale - 2f64.ln()).abs() < 1e-12);
        assert!((l.total - (6.0 * 2f64.ln() + 3f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(scheduled_sampling_prob(1, 5).unwrap(), 0.0);
        assert_eq!(scheduled_sampling_prob(5, 5).unwrap(), 1.0);
        assert!(scheduled_sampling_prob(1, 1).is_err());
        assert!(scheduled_sampling_prob(0, 3).is_err());
    }

    #[test]
    fn config_rejects_unknown_keys_and_one_epoch() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"gamma": 6, "bogus": 1}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"total_epochs": 1}"#).unwrap();
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn lazy_adam_leaves_untouched_rows() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("emb", Tensor::filled(3, 2, 1.0));
        let mut g = Gradients::default();
        g.accumulate_row(id, 1, &[0.5, -0.5]);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &g, |_| 0.1, |_| 0.0);
        let v = store.get(id);
        assert_eq!(v.row(0), &[1.0, 1.0]);
        assert_eq!(v.row(2), &[1.0, 1.0]);
        assert!((v.get(1, 0) - 0.9).abs() < 1e-6);
        assert!((v.get(1, 1) - 1.1).abs() < 1e-6);
    }
}
