//! The paragraph-level joint model: encoder, word attention, rationale head and
//! stance head, with optional per-domain head sets.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Stance;
use crate::encoder::{assemble_sequence, EncoderBackend, EncoderConfig, TinyEncoder, TokenSequence};
use crate::error::{Error, Result};
use crate::heads::{
    select_rationale_inputs, to_dist, word_attention_pool, Activation, AttentionPool, KgatConfig,
    KgatStanceHead, Mlp, RationaleScores, SelectionMode, SimpleStanceHead,
};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{softmax_rows, Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StanceHeadKind {
    Simple,
    Kgat,
}

/// Domain owning a rationale/stance head set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Scifact,
    Fever,
}

impl Domain {
    pub fn prefix(self) -> &'static str {
        match self {
            Domain::Scifact => "scifact.",
            Domain::Fever => "fever.",
        }
    }
}

pub const WORD_ATTN_PREFIX: &str = "word_attn";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub stance_head: StanceHeadKind,
    pub kgat: KgatConfig,
    /// Head sets; the first is the default for prediction.
    pub domains: Vec<Domain>,
    /// Dropout on pooled sentence representations during training.
    pub dropout: f64,
    /// Dropout on KGAT kernel features during training.
    pub kgat_dropout: f64,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, stance_head: StanceHeadKind) -> Self {
        Self {
            encoder,
            stance_head,
            kgat: KgatConfig::default(),
            domains: vec![Domain::Scifact],
            dropout: 0.0,
            kgat_dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.kgat.validate()?;
        if self.domains.is_empty() {
            return Err(Error::Config("model needs at least one domain".into()));
        }
        for p in [self.dropout, self.kgat_dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum StanceHead {
    Simple(SimpleStanceHead),
    Kgat(KgatStanceHead),
}

#[derive(Debug, Clone, Copy)]
pub struct HeadSet {
    pub rationale: Mlp,
    pub stance: StanceHead,
}

/// Supervision for one forward pass. Masks cover every sentence span,
/// dummy included (always `false`).
#[derive(Debug, Clone, Copy)]
pub struct Targets<'a> {
    pub rationale_mask: &'a [bool],
    pub stance: Stance,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub rationale: Var,
    pub stance: Var,
    pub total: Var,
}

pub struct Forward<T> {
    pub token_reps: Var,
    pub sent_reps: Var,
    /// `n_spans x 2` softmax of the rationale head.
    pub rationale_probs: Tensor<T>,
    pub scores: RationaleScores<T>,
    /// Sentence-span indices fed to the stance head.
    pub stance_inputs: Vec<usize>,
    /// Exact rows the stance head consumed (sentence rows for the simple
    /// head, stacked token rows for KGAT).
    pub stance_input_rows: Tensor<T>,
    pub stance_probs: [T; 3],
    pub loss: Option<LossVars>,
}

/// One (claim, abstract) prediction; arrays exclude the dummy sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub claim_id: u64,
    pub doc_id: u64,
    /// Rationale probability of each kept sentence.
    pub rationale_probs: Vec<f64>,
    /// Sentences with `p_r > p_not_r`.
    pub selected: Vec<usize>,
    pub stance_probs: [f64; 3],
}

impl ModelOutput {
    /// Most probable stance; ties resolve to the earlier label.
    pub fn argmax_stance(&self) -> Stance {
        let mut best = 0;
        for i in 1..3 {
            if self.stance_probs[i] > self.stance_probs[best] {
                best = i;
            }
        }
        Stance::from_index(best)
    }
}

#[derive(Clone)]
pub struct JointModel<T: Scalar> {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub encoder: EncoderBackend<T>,
    pub store: ParamStore<T>,
    word_attn: AttentionPool,
    heads: BTreeMap<Domain, HeadSet>,
}

impl<T: Scalar> JointModel<T> {
    /// Freshly initialized model; all randomness comes from `seed`.
    pub fn new(config: ModelConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.encoder.vocab_size != tokenizer.vocab_size() {
            return Err(Error::Config(format!(
                "encoder vocab_size {} differs from tokenizer vocabulary {}",
                config.encoder.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = TinyEncoder::init(config.encoder.clone(), &mut store, &mut rng)?;
        init_heads(&config, &mut store, &mut rng);
        Self::assemble(config, tokenizer, EncoderBackend::Tiny(encoder), store)
    }

    /// Binds a model around existing parameters (e.g. from a checkpoint).
    pub fn from_store(config: ModelConfig, tokenizer: Tokenizer, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let encoder = TinyEncoder::bind(config.encoder.clone(), &store)?;
        Self::assemble(config, tokenizer, EncoderBackend::Tiny(encoder), store)
    }

    /// Heads on top of an external encoder; only head parameters are created.
    pub fn with_external_encoder(
        config: ModelConfig,
        encoder: std::sync::Arc<dyn crate::encoder::ExternalEncoder<T>>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if encoder.d_model() != config.encoder.d_model {
            return Err(Error::Config("external encoder width differs from config d_model".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_heads(&config, &mut store, &mut rng);
        let tokenizer = encoder.tokenizer().clone();
        Self::assemble(config, tokenizer, EncoderBackend::External(encoder), store)
    }

    fn assemble(config: ModelConfig, tokenizer: Tokenizer, encoder: EncoderBackend<T>, store: ParamStore<T>) -> Result<Self> {
        let mut heads = BTreeMap::new();
        for &domain in &config.domains {
            heads.insert(domain, bind_heads(&config, &store, domain)?);
        }
        let word_attn = bind_checked(&store, WORD_ATTN_PREFIX, AttentionPool::bind)?;
        Ok(Self {
            config,
            tokenizer,
            encoder,
            store,
            word_attn,
            heads,
        })
    }

    /// Re-draws word attention and every head set, keeping encoder weights.
    pub fn reinit_heads(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_heads(&self.config, &mut self.store, &mut rng);
    }

    pub fn default_domain(&self) -> Domain {
        self.config.domains[0]
    }

    pub fn heads(&self, domain: Domain) -> Option<&HeadSet> {
        self.heads.get(&domain)
    }

    pub fn word_attention(&self) -> &AttentionPool {
        &self.word_attn
    }

    /// Claim and sentences packed with the dummy sentence in front.
    pub fn sequence(&self, claim: &str, sentences: &[String]) -> Result<TokenSequence> {
        assemble_sequence(claim, sentences, &self.tokenizer, true, self.encoder.max_sequence_length())
    }

    /// Records a forward pass on `tape`.
    ///
    /// `dropout_rng` enables training-mode dropout when the config asks for it.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        seq: &TokenSequence,
        domain: Domain,
        mode: SelectionMode<'_>,
        targets: Option<Targets<'_>>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Forward<T> {
        let heads = self
            .heads
            .get(&domain)
            .unwrap_or_else(|| panic!("model has no head set for {domain:?}"));
        let store = &self.store;
        let token_reps = self.encoder.forward(tape, store, seq, None);

        let pooled: Vec<Var> = seq
            .sentence_spans()
            .iter()
            .map(|&span| word_attention_pool(tape, store, &self.word_attn, token_reps, span))
            .collect();
        let mut sent_reps = tape.concat_rows(&pooled);
        if let Some(rng) = dropout_rng.as_deref_mut() {
            sent_reps = apply_dropout(tape, sent_reps, self.config.dropout, rng);
        }

        let logits = heads.rationale.forward(tape, store, sent_reps);
        let rationale_probs = softmax_rows(tape.value(logits));
        let scores = RationaleScores::from_probs(&rationale_probs);
        let stance_inputs = select_rationale_inputs(&scores, mode, seq.has_dummy);

        let (stance_logits, stance_input_rows) = match &heads.stance {
            StanceHead::Simple(head) => {
                let rows = tape.gather_rows(sent_reps, &stance_inputs);
                let rows_value = tape.value(rows).clone();
                (head.forward(tape, store, rows), rows_value)
            }
            StanceHead::Kgat(head) => {
                let (cs, ce) = seq.claim_span();
                let claim = tape.slice_rows(token_reps, cs, ce);
                let spans = seq.sentence_spans();
                let sentences: Vec<Var> = stance_inputs
                    .iter()
                    .map(|&i| tape.slice_rows(token_reps, spans[i].0, spans[i].1))
                    .collect();
                let stacked = tape.concat_rows(&sentences);
                let rows_value = tape.value(stacked).clone();
                let p = self.config.kgat_dropout;
                let logits = head.forward(tape, store, &self.config.kgat, claim, &sentences, |tape, phi| {
                    match dropout_rng.as_deref_mut() {
                        Some(rng) => apply_dropout(tape, phi, p, rng),
                        None => phi,
                    }
                });
                (logits, rows_value)
            }
        };
        let stance_probs = to_dist(&softmax_rows(tape.value(stance_logits)));

        let loss = targets.map(|t| {
            assert_eq!(
                t.rationale_mask.len(),
                seq.num_sentence_spans(),
                "rationale mask must cover every sentence span"
            );
            let log_p = tape.log_softmax_rows(logits);
            let picks: Vec<Var> = t
                .rationale_mask
                .iter()
                .enumerate()
                .map(|(i, &is_r)| tape.pick(log_p, i, usize::from(is_r)))
                .collect();
            let picked = tape.concat_rows(&picks);
            let sum = tape.sum_all(picked);
            let rationale = tape.scale(sum, -T::one() / T::lit(picks.len() as f64));
            let log_s = tape.log_softmax_rows(stance_logits);
            let s = tape.pick(log_s, 0, t.stance.index());
            let stance = tape.scale(s, -T::one());
            let weighted = tape.scale(rationale, T::lit(t.gamma));
            let total = tape.add(weighted, stance);
            LossVars { rationale, stance, total }
        });

        Forward {
            token_reps,
            sent_reps,
            rationale_probs,
            scores,
            stance_inputs,
            stance_input_rows,
            stance_probs,
            loss,
        }
    }

    /// Evaluation-mode prediction for one abstract.
    pub fn predict(&self, claim_id: u64, claim: &str, doc_id: u64, sentences: &[String], domain: Domain) -> Result<ModelOutput> {
        let seq = self.sequence(claim, sentences)?;
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, &seq, domain, SelectionMode::Predicted, None, None);
        Ok(self.output(claim_id, doc_id, &seq, &fwd))
    }

    pub fn output(&self, claim_id: u64, doc_id: u64, seq: &TokenSequence, fwd: &Forward<T>) -> ModelOutput {
        let first = seq.first_real();
        ModelOutput {
            claim_id,
            doc_id,
            rationale_probs: (first..seq.num_sentence_spans())
                .map(|i| fwd.rationale_probs.get(i, 1).as_f64())
                .collect(),
            selected: fwd
                .scores
                .selected
                .iter()
                .filter(|&&i| i >= first)
                .map(|&i| i - first)
                .collect(),
            stance_probs: fwd.stance_probs.map(|p| p.as_f64()),
        }
    }
}

fn bind_checked<F, R, T: Scalar>(store: &ParamStore<T>, prefix: &str, f: F) -> Result<R>
where
    F: FnOnce(&ParamStore<T>, &str) -> R,
{
    if store.id(&format!("{prefix}.w1")).is_none() {
        return Err(Error::Config(format!("missing parameters under {prefix}")));
    }
    Ok(f(store, prefix))
}

fn init_heads<T: Scalar>(config: &ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
    let d = config.encoder.d_model;
    AttentionPool::init(store, WORD_ATTN_PREFIX, d, rng);
    let k = config.kgat.len();
    for domain in &config.domains {
        let p = domain.prefix();
        Mlp::init(store, &format!("{p}rationale"), (d, d, 2), Activation::Relu, rng);
        match config.stance_head {
            StanceHeadKind::Simple => {
                AttentionPool::init(store, &format!("{p}sent_attn"), d, rng);
                Mlp::init(store, &format!("{p}stance"), (d, d, 3), Activation::Relu, rng);
            }
            StanceHeadKind::Kgat => {
                Mlp::init(store, &format!("{p}kgat.readout"), (k, k, 1), Activation::Tanh, rng);
                Mlp::init(store, &format!("{p}kgat.out"), (d + k, d, 3), Activation::Relu, rng);
            }
        }
    }
}

fn bind_heads<T: Scalar>(config: &ModelConfig, store: &ParamStore<T>, domain: Domain) -> Result<HeadSet> {
    let p = domain.prefix();
    let rationale = bind_checked(store, &format!("{p}rationale"), |s, n| Mlp::bind(s, n, Activation::Relu))?;
    let stance = match config.stance_head {
        StanceHeadKind::Simple => StanceHead::Simple(SimpleStanceHead {
            attn: bind_checked(store, &format!("{p}sent_attn"), AttentionPool::bind)?,
            mlp: bind_checked(store, &format!("{p}stance"), |s, n| Mlp::bind(s, n, Activation::Relu))?,
        }),
        StanceHeadKind::Kgat => StanceHead::Kgat(KgatStanceHead {
            readout: bind_checked(store, &format!("{p}kgat.readout"), |s, n| Mlp::bind(s, n, Activation::Tanh))?,
            out: bind_checked(store, &format!("{p}kgat.out"), |s, n| Mlp::bind(s, n, Activation::Relu))?,
        }),
    };
    Ok(HeadSet { rationale, stance })
}

fn apply_dropout<T: Scalar>(tape: &mut Tape<T>, x: Var, p: f64, rng: &mut ChaCha8Rng) -> Var {
    if p <= 0.0 {
        return x;
    }
    let keep = T::lit(1.0 / (1.0 - p));
    let n = tape.value(x).data().len();
    let mask = (0..n)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect();
    tape.dropout_with_mask(x, mask)
}
