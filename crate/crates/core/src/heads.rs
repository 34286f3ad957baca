//! Sentence pooling, rationale selection and stance prediction on top of the
//! token representations.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::params::{xavier, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{softmax_rows, Tape, Var};
use crate::tensor::Tensor;

/// Scale applied to summed log kernel features.
pub const KERNEL_FEATURE_SCALE: f64 = 0.01;
/// Added inside the log of kernel pooling.
pub const KERNEL_LOG_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Two-layer perceptron `act(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub act: Activation,
}

impl Mlp {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dims: (usize, usize, usize),
        act: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (i, h, o) = dims;
        store.insert(format!("{prefix}.w1"), xavier(i, h, rng));
        store.insert(format!("{prefix}.b1"), Tensor::zeros(1, h));
        store.insert(format!("{prefix}.w2"), xavier(h, o, rng));
        store.insert(format!("{prefix}.b2"), Tensor::zeros(1, o));
        Self::bind(store, prefix, act)
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, prefix: &str, act: Activation) -> Self {
        Self {
            w1: store.expect_id(&format!("{prefix}.w1")),
            b1: store.expect_id(&format!("{prefix}.b1")),
            w2: store.expect_id(&format!("{prefix}.w2")),
            b2: store.expect_id(&format!("{prefix}.b2")),
            act,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = match self.act {
            Activation::Tanh => tape.tanh(h),
            Activation::Relu => tape.relu(h),
        };
        let o = tape.matmul(h, w2);
        tape.add_row(o, b2)
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Self-attention pooling: softmax over rows of a tanh-MLP scalar score, then a
/// weighted sum of the rows.
#[derive(Debug, Clone, Copy)]
pub struct AttentionPool {
    pub scorer: Mlp,
}

impl AttentionPool {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            scorer: Mlp::init(store, prefix, (d, d, 1), Activation::Tanh, rng),
        }
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Self {
        Self {
            scorer: Mlp::bind(store, prefix, Activation::Tanh),
        }
    }

    /// Pools the rows of `x` (`m x d`) into `1 x d`; also returns the `1 x m` weights.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> (Var, Var) {
        let scores = self.scorer.forward(tape, store, x);
        let scores = tape.transpose(scores);
        let alpha = tape.softmax_rows(scores);
        (tape.matmul(alpha, x), alpha)
    }
}

/// Word-level attention over one sentence span `[start, end)` of `token_reps`.
pub fn word_attention_pool<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    pool: &AttentionPool,
    token_reps: Var,
    span: (usize, usize),
) -> Var {
    assert!(span.1 > span.0, "empty span");
    let rows = tape.slice_rows(token_reps, span.0, span.1);
    pool.forward(tape, store, rows).0
}

/// Per-sentence rationale probabilities and the selected sentence indices.
#[derive(Debug, Clone, PartialEq)]
pub struct RationaleScores<T> {
    /// `(p_not_r, p_r)` per sentence.
    pub probs: Vec<(T, T)>,
    /// Indices with `p_r > p_not_r`, ascending.
    pub selected: Vec<usize>,
}

impl<T: Scalar> RationaleScores<T> {
    pub fn from_probs(probs: &Tensor<T>) -> Self {
        let probs: Vec<(T, T)> = (0..probs.rows()).map(|r| (probs.get(r, 0), probs.get(r, 1))).collect();
        let selected = probs
            .iter()
            .enumerate()
            .filter(|(_, (not_r, r))| r > not_r)
            .map(|(i, _)| i)
            .collect();
        Self { probs, selected }
    }
}

/// Rationale logits (`n x 2`) for stacked sentence representations.
pub fn rationale_logits<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, mlp: &Mlp, sent_reps: Var) -> Var {
    mlp.forward(tape, store, sent_reps)
}

/// Evaluation helper: softmax rationale scores of `sent_reps`.
pub fn score_rationales<T: Scalar>(store: &ParamStore<T>, mlp: &Mlp, sent_reps: &Tensor<T>) -> RationaleScores<T> {
    assert!(sent_reps.rows() > 0, "no sentences to score");
    let mut tape = Tape::new();
    let x = tape.constant(sent_reps.clone());
    let logits = rationale_logits(&mut tape, store, mlp, x);
    RationaleScores::from_probs(&softmax_rows(tape.value(logits)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode<'a> {
    Predicted,
    /// Gold mask over all sentence spans (dummy included).
    Gold(&'a [bool]),
}

/// Sentence-span indices forwarded to the stance head.
///
/// Candidates are spans `first_real..`; the dummy span (index 0 when
/// `has_dummy`) is used alone when nothing is selected.
pub fn select_rationale_inputs<T: Scalar>(
    scores: &RationaleScores<T>,
    mode: SelectionMode<'_>,
    has_dummy: bool,
) -> Vec<usize> {
    let first_real = usize::from(has_dummy);
    let picked: Vec<usize> = match mode {
        SelectionMode::Predicted => scores.selected.iter().copied().filter(|&i| i >= first_real).collect(),
        SelectionMode::Gold(mask) => {
            assert_eq!(mask.len(), scores.probs.len(), "gold mask length differs from sentence count");
            (first_real..mask.len()).filter(|&i| mask[i]).collect()
        }
    };
    if picked.is_empty() {
        assert!(has_dummy, "empty rationale selection without a dummy sentence");
        vec![0]
    } else {
        picked
    }
}

/// Parameters of the simple sentence-attention stance head.
#[derive(Debug, Clone, Copy)]
pub struct SimpleStanceHead {
    pub attn: AttentionPool,
    pub mlp: Mlp,
}

impl SimpleStanceHead {
    /// Stance logits (`1 x 3`) from the selected sentence rows (`r x d`).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, selected: Var) -> Var {
        let (pooled, _) = self.attn.forward(tape, store, selected);
        self.mlp.forward(tape, store, pooled)
    }
}

/// Stance distribution of the simple head for already-selected rows.
pub fn stance_simple<T: Scalar>(store: &ParamStore<T>, head: &SimpleStanceHead, selected: &Tensor<T>) -> [T; 3] {
    let mut tape = Tape::new();
    let x = tape.constant(selected.clone());
    let logits = head.forward(&mut tape, store, x);
    to_dist(&softmax_rows(tape.value(logits)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgatConfig {
    pub mus: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl KgatConfig {
    /// `n` kernels: an exact-match kernel at 1.0 (sigma 1e-3) and `n - 1` soft
    /// kernels centred at `1 - b/2, 1 - 3b/2, ...` with `b = 2/(n-1)` and sigma 0.1.
    pub fn with_kernels(n: usize) -> Self {
        assert!(n >= 2, "need the exact-match kernel plus at least one soft kernel");
        let bin = 2.0 / (n - 1) as f64;
        let mut mus = vec![1.0, 1.0 - bin / 2.0];
        for _ in 2..n {
            let last = *mus.last().expect("non-empty");
            mus.push(last - bin);
        }
        let mut sigmas = vec![0.1; n];
        sigmas[0] = 1e-3;
        Self { mus, sigmas }
    }

    pub fn len(&self) -> usize {
        self.mus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mus.is_empty()
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.mus.is_empty() || self.mus.len() != self.sigmas.len() || self.sigmas.iter().any(|&s| s <= 0.0) {
            return Err(crate::Error::Config(
                "KGAT needs K >= 1 kernels with matching positive sigmas".into(),
            ));
        }
        Ok(())
    }
}

impl Default for KgatConfig {
    fn default() -> Self {
        Self::with_kernels(21)
    }
}

/// Parameters of the kernel graph attention stance head.
#[derive(Debug, Clone, Copy)]
pub struct KgatStanceHead {
    /// kernel features -> evidence score
    pub readout: Mlp,
    /// [mean token rep ; kernel features] -> stance logits
    pub out: Mlp,
}

impl KgatStanceHead {
    /// Kernel features of one evidence sentence against the claim.
    pub fn kernel_features<T: Scalar>(
        tape: &mut Tape<T>,
        config: &KgatConfig,
        claim_normed: Var,
        sentence: Var,
    ) -> Var {
        let sn = tape.row_l2_normalize(sentence, T::lit(1e-12));
        let sim = tape.matmul_bt(claim_normed, sn);
        let mus: Vec<T> = config.mus.iter().map(|&m| T::lit(m)).collect();
        let sigmas: Vec<T> = config.sigmas.iter().map(|&s| T::lit(s)).collect();
        tape.kernel_pool(sim, &mus, &sigmas, T::lit(KERNEL_FEATURE_SCALE), T::lit(KERNEL_LOG_EPS))
    }

    /// Stance logits (`1 x 3`) from claim tokens (`n_c x d`) and the token rows
    /// of every selected sentence. `feature_dropout` masks the kernel features.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        config: &KgatConfig,
        claim: Var,
        sentences: &[Var],
        mut feature_dropout: impl FnMut(&mut Tape<T>, Var) -> Var,
    ) -> Var {
        assert!(!sentences.is_empty(), "KGAT needs at least one evidence sentence");
        let cn = tape.row_l2_normalize(claim, T::lit(1e-12));
        let mut scores = Vec::with_capacity(sentences.len());
        let mut nodes = Vec::with_capacity(sentences.len());
        for &s in sentences {
            let phi = Self::kernel_features(tape, config, cn, s);
            let phi = feature_dropout(tape, phi);
            scores.push(self.readout.forward(tape, store, phi));
            let pooled = tape.mean_rows(s);
            nodes.push(tape.concat_cols(&[pooled, phi]));
        }
        let scores = tape.concat_rows(&scores);
        let scores = tape.transpose(scores);
        let beta = tape.softmax_rows(scores);
        let nodes = tape.concat_rows(&nodes);
        let paragraph = tape.matmul(beta, nodes);
        self.out.forward(tape, store, paragraph)
    }
}

/// Stance distribution of the KGAT head.
pub fn stance_kgat<T: Scalar>(
    store: &ParamStore<T>,
    head: &KgatStanceHead,
    config: &KgatConfig,
    claim_reps: &Tensor<T>,
    sentence_reps: &[Tensor<T>],
) -> [T; 3] {
    let mut tape = Tape::new();
    let c = tape.constant(claim_reps.clone());
    let s: Vec<Var> = sentence_reps.iter().map(|t| tape.constant(t.clone())).collect();
    let logits = head.forward(&mut tape, store, config, c, &s, |_, v| v);
    to_dist(&softmax_rows(tape.value(logits)))
}

pub(crate) fn to_dist<T: Scalar>(p: &Tensor<T>) -> [T; 3] {
    assert_eq!(p.shape(), (1, 3));
    [p.get(0, 0), p.get(0, 1), p.get(0, 2)]
}
