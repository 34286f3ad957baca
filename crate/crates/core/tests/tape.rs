use parajoint::gradcheck::{gradient_check, GradCheckOptions};
use parajoint::params::{uniform, ParamStore};
use parajoint::tape::{Fault, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn store() -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = ParamStore::new();
    s.insert("a", uniform(4, 5, 1.0, &mut rng));
    s.insert("b", uniform(5, 3, 1.0, &mut rng));
    s.insert("row", uniform(1, 3, 1.0, &mut rng));
    s.insert("emb", uniform(10, 3, 1.0, &mut rng));
    s
}

type LossFn = fn(&mut Tape<f64>, &ParamStore<f64>) -> Var;

fn matmul_chain(t: &mut Tape<f64>, s: &ParamStore<f64>) -> Var {
    let a = t.param_named(s, "a");
    let b = t.param_named(s, "b");
    let r = t.param_named(s, "row");
    let x = t.matmul(a, b);
    let x = t.add_row(x, r);
    let x = t.tanh(x);
    t.sum_all(x)
}

fn normalisation(t: &mut Tape<f64>, s: &ParamStore<f64>) -> Var {
    let a = t.param_named(s, "a");
    let b = t.param_named(s, "b");
    let x = t.matmul(a, b);
    let x = t.layer_norm_rows(x, 1e-5);
    let r = t.param_named(s, "row");
    let x = t.mul_row(x, r);
    let x = t.softmax_rows(x);
    let x = t.ln(x);
    let x = t.pick(x, 2, 1);
    t.scale(x, -1.0)
}

fn kernels(t: &mut Tape<f64>, s: &ParamStore<f64>) -> Var {
    let e = t.param_named(s, "emb");
    let id = s.expect_id("emb");
    let claim = t.param_rows(s, id, &[1, 4]);
    let sent = t.gather_rows(e, &[2, 7, 7]);
    let sim = t.matmul_bt(claim, sent);
    let phi = t.kernel_pool(sim, &[0.9, 0.3, -0.3], &[0.1, 0.4, 0.4], 0.5, 1e-10);
    let phi = t.square(phi);
    t.sum_all(phi)
}

fn structure(t: &mut Tape<f64>, s: &ParamStore<f64>) -> Var {
    let a = t.param_named(s, "a");
    let top = t.slice_rows(a, 0, 2);
    let left = t.slice_cols(a, 1, 3);
    let lt = t.transpose(left);
    let m = t.matmul(lt, a);
    let m = t.add(m, top);
    let both = t.concat_rows(&[m, m]);
    let c = t.concat_cols(&[both, both]);
    let c = t.relu(c);
    let c = t.mean_rows(c);
    let c = t.exp(c);
    t.sum_all(c)
}

const CASES: [(&str, LossFn); 4] = [
    ("matmul chain", matmul_chain),
    ("normalisation", normalisation),
    ("kernels", kernels),
    ("structure", structure),
];

#[test]
fn operations_pass_finite_differences() {
    let s = store();
    let opts = GradCheckOptions {
        max_entries_per_param: None,
        ..Default::default()
    };
    for (name, f) in CASES {
        let report = gradient_check(&s, Tape::new, f, opts).unwrap();
        assert!(report.entries_checked > 0, "{name}");
        assert!(report.max_rel_error < 1e-5, "{name}: {report:?}");
    }
}

#[test]
fn injected_faults_are_detected() {
    let s = store();
    for (fault, f) in [(Fault::TanhBackward, matmul_chain as LossFn), (Fault::SoftmaxBackward, normalisation)] {
        let report = gradient_check(&s, || Tape::with_fault(fault), f, GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_error > 1e-2, "{fault:?}: {report:?}");
    }
}

#[test]
fn embedding_gradients_touch_only_used_rows() {
    let s = store();
    let mut t = Tape::new();
    let out = kernels(&mut t, &s);
    let grads = t.backward(out);
    let id = s.expect_id("emb");
    for r in 0..10 {
        let nonzero = (0..3).any(|c| grads.entry(id, r, c) != 0.0);
        assert_eq!(nonzero, [1, 2, 4, 7].contains(&r), "row {r}");
    }
}
