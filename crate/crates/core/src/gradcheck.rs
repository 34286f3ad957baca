//! Central finite-difference checks of tape gradients (double precision).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ClaimInstance;
use crate::error::{Error, Result};
use crate::heads::SelectionMode;
use crate::model::{Domain, JointModel, Targets};
use crate::params::{ParamGrad, ParamStore};
use crate::tape::{Fault, Tape, Var};
use crate::training::span_mask;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Added to `|analytic| + |numeric|` in the relative-error denominator.
    /// Structurally zero gradients (e.g. attention key biases) have numeric
    /// estimates around 1e-10 from round-off; this floor keeps them at ~1e-5.
    pub denom_eps: f64,
    /// Entries sampled per parameter; `None` checks every entry.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            denom_eps: 1e-5,
            max_entries_per_param: Some(24),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and entry of the largest error.
    pub worst: Option<(String, usize, usize)>,
    pub entries_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, eps: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + eps)
}

/// Compares the gradient of `loss` from `tape_factory()` against central
/// differences for every parameter in `store`. Embedding tables are checked on
/// the rows the loss touches.
pub fn gradient_check(
    store: &ParamStore<f64>,
    tape_factory: impl Fn() -> Tape<f64>,
    loss: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut tape = tape_factory();
    let out = loss(&mut tape, store);
    let base = tape.value(out).item();
    if !base.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let grads = tape.backward(out);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let eval = |s: &ParamStore<f64>| {
        let mut t = Tape::new();
        let v = loss(&mut t, s);
        t.value(v).item()
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for (id, param) in store.iter() {
        let (rows, cols) = param.value.shape();
        let candidates: Vec<(usize, usize)> = match grads.get(id) {
            Some(ParamGrad::Rows(map)) => map.keys().flat_map(|&r| (0..cols).map(move |c| (r, c))).collect(),
            Some(ParamGrad::Dense(_)) => (0..rows * cols).map(|i| (i / cols, i % cols)).collect(),
            None => continue,
        };
        let picked: Vec<(usize, usize)> = match opts.max_entries_per_param {
            Some(m) if m < candidates.len() => sample(&mut rng, candidates.len(), m)
                .into_iter()
                .map(|i| candidates[i])
                .collect(),
            _ => candidates,
        };
        for (r, c) in picked {
            let analytic = grads.entry(id, r, c);
            let orig = param.value.get(r, c);
            work.get_mut(id).set(r, c, orig + opts.step);
            let plus = eval(&work);
            work.get_mut(id).set(r, c, orig - opts.step);
            let minus = eval(&work);
            work.get_mut(id).set(r, c, orig);
            let numeric = (plus - minus) / (2.0 * opts.step);
            if !analytic.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {} at ({r}, {c})", param.name)));
            }
            let err = relative_error(analytic, numeric, opts.denom_eps);
            report.entries_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((param.name.clone(), r, c));
            }
        }
    }
    Ok(report)
}

/// Gradient check of the full joint loss of `model` on one instance, with gold
/// rationale inputs to the stance head.
pub fn check_model(
    model: &JointModel<f64>,
    inst: &ClaimInstance,
    gamma: f64,
    opts: GradCheckOptions,
    fault: Option<Fault>,
) -> Result<GradCheckReport> {
    let seq = model.sequence(&inst.claim, &inst.sentences)?;
    let mask = span_mask(inst, &seq);
    let domain: Domain = model.default_domain();
    let loss = |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
        let mut m = model.clone();
        m.store = store.clone();
        let targets = Targets {
            rationale_mask: &mask,
            stance: inst.stance,
            gamma,
        };
        let fwd = m.forward(tape, &seq, domain, SelectionMode::Gold(&mask), Some(targets), None);
        fwd.loss.expect("targets given").total
    };
    let factory = || match fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    };
    gradient_check(&model.store, factory, loss, opts)
}
