//! Compact paragraph encoding: the claim and every sentence of an abstract are
//! packed into one separator-delimited sequence and contextualized together.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{uniform, xavier, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::{Tokenizer, CLS_ID, SEP_ID};

/// Sentinel sentence placed before the abstract so the stance head always has input.
pub const DUMMY_SENTENCE: &str = "@";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    Learned,
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_sequence_length: usize,
    pub positional: Positional,
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_sequence_length: 512,
            positional: Positional::Learned,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_sequence_length < 4 {
            return Err(Error::Config("vocab_size and max_sequence_length too small".into()));
        }
        Ok(())
    }
}

/// Token ids of `[CLS] claim [SEP] s_1 [SEP] ... s_l [SEP]` with a span map.
///
/// `spans[0]` is the claim span (starting at `[CLS]`). `spans[1..]` are sentence
/// spans, each starting at its leading `[SEP]`. The closing `[SEP]` belongs to no
/// span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub token_ids: Vec<u32>,
    pub spans: Vec<(usize, usize)>,
    pub has_dummy: bool,
    /// Trailing sentences removed to respect the length limit.
    pub dropped_sentences: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn claim_span(&self) -> (usize, usize) {
        self.spans[0]
    }

    /// Sentence spans including the dummy sentence when present.
    pub fn sentence_spans(&self) -> &[(usize, usize)] {
        &self.spans[1..]
    }

    pub fn num_sentence_spans(&self) -> usize {
        self.spans.len() - 1
    }

    /// Number of real (non-dummy) sentences kept.
    pub fn num_real_sentences(&self) -> usize {
        self.num_sentence_spans() - usize::from(self.has_dummy)
    }

    /// Span index of the first real sentence.
    pub fn first_real(&self) -> usize {
        usize::from(self.has_dummy)
    }
}

/// Packs claim and sentences into one sequence. When the result would exceed
/// `max_len`, whole trailing sentences are dropped.
pub fn assemble_sequence(
    claim: &str,
    sentences: &[String],
    tokenizer: &Tokenizer,
    prepend_dummy: bool,
    max_len: usize,
) -> Result<TokenSequence> {
    assert!(!sentences.is_empty(), "assemble_sequence needs at least one sentence");
    let claim_ids = tokenizer.encode(claim);
    let mut sent_ids: Vec<Vec<u32>> = Vec::with_capacity(sentences.len() + 1);
    if prepend_dummy {
        sent_ids.push(tokenizer.encode(DUMMY_SENTENCE));
    }
    sent_ids.extend(sentences.iter().map(|s| tokenizer.encode(s)));

    // CLS + claim + one SEP per sentence + closing SEP
    let mut total = 1 + claim_ids.len() + 1 + sent_ids.iter().map(|s| s.len() + 1).sum::<usize>();
    let min_keep = usize::from(prepend_dummy) + 1;
    let mut dropped = 0;
    while total > max_len && sent_ids.len() > min_keep {
        let last = sent_ids.pop().expect("non-empty");
        total -= last.len() + 1;
        dropped += 1;
    }
    if total > max_len {
        return Err(Error::SequenceTooLong(format!(
            "claim plus first sentence need {total} tokens, limit is {max_len}"
        )));
    }

    let mut token_ids = Vec::with_capacity(total);
    token_ids.push(CLS_ID);
    token_ids.extend_from_slice(&claim_ids);
    let mut spans = vec![(0, token_ids.len())];
    for s in &sent_ids {
        let start = token_ids.len();
        token_ids.push(SEP_ID);
        token_ids.extend_from_slice(s);
        spans.push((start, token_ids.len()));
    }
    token_ids.push(SEP_ID);
    Ok(TokenSequence {
        token_ids,
        spans,
        has_dummy: prepend_dummy,
        dropped_sentences: dropped,
    })
}

#[derive(Debug, Clone)]
struct LayerIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Small post-LN transformer encoder trained from scratch.
#[derive(Debug, Clone)]
pub struct TinyEncoder {
    config: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: Option<ParamId>,
    layers: Vec<LayerIds>,
}

pub const ENCODER_PREFIX: &str = "encoder.";

impl TinyEncoder {
    /// Registers freshly initialized encoder parameters in `store`.
    pub fn init<T: Scalar>(config: EncoderConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        store.insert("encoder.tok_emb", uniform(config.vocab_size, d, 0.5, rng));
        if config.positional == Positional::Learned {
            store.insert("encoder.pos_emb", uniform(config.max_sequence_length, d, 0.1, rng));
        }
        for l in 0..config.n_layers {
            let p = |s: &str| format!("encoder.layer{l}.{s}");
            for w in ["wq", "wk", "wv", "wo"] {
                store.insert(p(w), xavier(d, d, rng));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                store.insert(p(b), Tensor::zeros(1, d));
            }
            store.insert(p("ln1_g"), Tensor::filled(1, d, T::one()));
            store.insert(p("ln1_b"), Tensor::zeros(1, d));
            store.insert(p("w1"), xavier(d, config.d_ff, rng));
            store.insert(p("b1"), Tensor::zeros(1, config.d_ff));
            store.insert(p("w2"), xavier(config.d_ff, d, rng));
            store.insert(p("b2"), Tensor::zeros(1, d));
            store.insert(p("ln2_g"), Tensor::filled(1, d, T::one()));
            store.insert(p("ln2_b"), Tensor::zeros(1, d));
        }
        Self::bind(config, store)
    }

    /// Resolves parameter ids of an encoder already present in `store`.
    pub fn bind<T: Scalar>(config: EncoderConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let get = |name: String, shape: (usize, usize)| -> Result<ParamId> {
            let id = store
                .id(&name)
                .ok_or_else(|| Error::Config(format!("missing encoder parameter {name}")))?;
            if store.get(id).shape() != shape {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, config expects {shape:?}",
                    store.get(id).shape()
                )));
            }
            Ok(id)
        };
        let d = config.d_model;
        let tok_emb = get("encoder.tok_emb".into(), (config.vocab_size, d))?;
        let pos_emb = match config.positional {
            Positional::Learned => Some(get("encoder.pos_emb".into(), (config.max_sequence_length, d))?),
            Positional::Sinusoidal => None,
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("encoder.layer{l}.{s}");
            layers.push(LayerIds {
                wq: get(p("wq"), (d, d))?,
                bq: get(p("bq"), (1, d))?,
                wk: get(p("wk"), (d, d))?,
                bk: get(p("bk"), (1, d))?,
                wv: get(p("wv"), (d, d))?,
                bv: get(p("bv"), (1, d))?,
                wo: get(p("wo"), (d, d))?,
                bo: get(p("bo"), (1, d))?,
                ln1_g: get(p("ln1_g"), (1, d))?,
                ln1_b: get(p("ln1_b"), (1, d))?,
                w1: get(p("w1"), (d, config.d_ff))?,
                b1: get(p("b1"), (1, config.d_ff))?,
                w2: get(p("w2"), (config.d_ff, d))?,
                b2: get(p("b2"), (1, d))?,
                ln2_g: get(p("ln2_g"), (1, d))?,
                ln2_b: get(p("ln2_b"), (1, d))?,
            });
        }
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Records the forward pass on `tape`; returns the `len x d_model`
    /// representations. Attention maps are appended to `attn` when given, one
    /// per (layer, head).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        seq: &TokenSequence,
        mut attn: Option<&mut Vec<Tensor<T>>>,
    ) -> Var {
        let n = seq.len();
        assert!(
            n <= self.config.max_sequence_length,
            "sequence of {n} tokens exceeds positional table of {}",
            self.config.max_sequence_length
        );
        let ids: Vec<usize> = seq.token_ids.iter().map(|&t| t as usize).collect();
        assert!(
            ids.iter().all(|&t| t < self.config.vocab_size),
            "token id outside vocabulary"
        );
        let tok = tape.param_rows(store, self.tok_emb, &ids);
        let pos = match self.pos_emb {
            Some(id) => {
                let positions: Vec<usize> = (0..n).collect();
                tape.param_rows(store, id, &positions)
            }
            None => tape.constant(sinusoidal_table(n, self.config.d_model)),
        };
        let mut x = tape.add(tok, pos);

        let d = self.config.d_model;
        let dh = d / self.config.n_heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let eps = T::lit(self.config.layer_norm_eps);
        for layer in &self.layers {
            let proj = |tape: &mut Tape<T>, x: Var, w: ParamId, b: ParamId| {
                let w = tape.param(store, w);
                let b = tape.param(store, b);
                let xw = tape.matmul(x, w);
                tape.add_row(xw, b)
            };
            let q = proj(tape, x, layer.wq, layer.bq);
            let k = proj(tape, x, layer.wk, layer.bk);
            let v = proj(tape, x, layer.wv, layer.bv);
            let mut heads = Vec::with_capacity(self.config.n_heads);
            for h in 0..self.config.n_heads {
                let qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
                let kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
                let vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
                let logits = tape.matmul_bt(qh, kh);
                let logits = tape.scale(logits, scale);
                let a = tape.softmax_rows(logits);
                if let Some(sink) = attn.as_deref_mut() {
                    sink.push(tape.value(a).clone());
                }
                heads.push(tape.matmul(a, vh));
            }
            let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
            let attn_out = proj(tape, merged, layer.wo, layer.bo);
            let res = tape.add(x, attn_out);
            x = affine_norm(tape, store, res, layer.ln1_g, layer.ln1_b, eps);

            let hidden = proj(tape, x, layer.w1, layer.b1);
            let hidden = tape.relu(hidden);
            let ff = proj(tape, hidden, layer.w2, layer.b2);
            let res = tape.add(x, ff);
            x = affine_norm(tape, store, res, layer.ln2_g, layer.ln2_b, eps);
        }
        x
    }
}

fn affine_norm<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    gain: ParamId,
    bias: ParamId,
    eps: T,
) -> Var {
    let normed = tape.layer_norm_rows(x, eps);
    let g = tape.param(store, gain);
    let b = tape.param(store, bias);
    let scaled = tape.mul_row(normed, g);
    tape.add_row(scaled, b)
}

pub fn sinusoidal_table<T: Scalar>(n: usize, d: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(n, d);
    for pos in 0..n {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            t.set(pos, i, T::lit(v));
        }
    }
    t
}

/// Contextualized token representations, one row per token.
pub type TokenRepresentations<T> = Tensor<T>;

/// Slot for an external pretrained encoder used at inference time. Its output
/// enters the tape as a constant, so only the heads train on top of it.
pub trait ExternalEncoder<T: Scalar>: Send + Sync {
    fn d_model(&self) -> usize;
    fn max_sequence_length(&self) -> usize;
    fn tokenizer(&self) -> &Tokenizer;
    fn encode(&self, seq: &TokenSequence) -> TokenRepresentations<T>;
}

#[derive(Clone)]
pub enum EncoderBackend<T: Scalar> {
    Tiny(TinyEncoder),
    External(Arc<dyn ExternalEncoder<T>>),
}

impl<T: Scalar> EncoderBackend<T> {
    pub fn d_model(&self) -> usize {
        match self {
            EncoderBackend::Tiny(e) => e.config.d_model,
            EncoderBackend::External(e) => e.d_model(),
        }
    }

    pub fn max_sequence_length(&self) -> usize {
        match self {
            EncoderBackend::Tiny(e) => e.config.max_sequence_length,
            EncoderBackend::External(e) => e.max_sequence_length(),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        seq: &TokenSequence,
        attn: Option<&mut Vec<Tensor<T>>>,
    ) -> Var {
        match self {
            EncoderBackend::Tiny(e) => e.forward(tape, store, seq, attn),
            EncoderBackend::External(e) => tape.constant(e.encode(seq)),
        }
    }
}

/// Evaluation-mode encoding of one sequence.
pub fn encode<T: Scalar>(encoder: &TinyEncoder, store: &ParamStore<T>, seq: &TokenSequence) -> TokenRepresentations<T> {
    let mut tape = Tape::new();
    let out = encoder.forward(&mut tape, store, seq, None);
    tape.value(out).clone()
}

/// Like [`encode`], also returning every attention map.
pub fn encode_with_attention<T: Scalar>(
    encoder: &TinyEncoder,
    store: &ParamStore<T>,
    seq: &TokenSequence,
) -> (TokenRepresentations<T>, Vec<Tensor<T>>) {
    let mut tape = Tape::new();
    let mut maps = Vec::new();
    let out = encoder.forward(&mut tape, store, seq, Some(&mut maps));
    (tape.value(out).clone(), maps)
}

/// Encodes each sequence independently; batches are processed one sequence at a time.
pub fn encode_batch<T: Scalar>(
    encoder: &TinyEncoder,
    store: &ParamStore<T>,
    batch: &[TokenSequence],
) -> Vec<TokenRepresentations<T>> {
    batch.iter().map(|s| encode(encoder, store, s)).collect()
}
