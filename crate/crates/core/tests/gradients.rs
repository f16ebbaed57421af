//! Finite-difference checks of every differentiable primitive.

use camse_core::numerics::{
    bilstm, conv_window, grad_check, lstm_cell, uniform, Axis, BiLstmParams, ParamStore, Tape, Tensor, Var,
};
use camse_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, 1.0)
}

/// Contracts an output with fixed random weights so no gradient is trivially zero.
fn project<'t>(tape: &'t Tape, out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let w = rand_tensor(&mut rng, &out.shape());
    out.mul(tape.constant(w)).map(|v| v.sum())
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=6)
}

fn check(store: &ParamStore, f: impl for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>, what: &str) {
    let report = grad_check(store, f, EPS).unwrap();
    assert!(
        report.max_rel_error < TOL,
        "{what}: rel error {} at {:?} (analytic {}, numeric {})",
        report.max_rel_error,
        report.worst,
        report.analytic,
        report.numeric
    );
}

#[test]
fn linear_objective_is_exact() {
    let mut store = ParamStore::new();
    store.add("p", Tensor::new(vec![4], vec![0.3, -1.0, 2.0, 5.0]).unwrap());
    let report = grad_check(&store, |tape, s| Ok(tape.param(s, s.id("p").unwrap()).sum()), 1e-3).unwrap();
    assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
}

#[test]
fn tanh_sum_below_1e6() {
    let mut store = ParamStore::new();
    store.add("p", Tensor::new(vec![5], vec![-2.0, -0.5, 0.1, 0.7, 1.9]).unwrap());
    let report = grad_check(&store, |tape, s| Ok(tape.param(s, s.id("p").unwrap()).tanh().sum()), EPS).unwrap();
    assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
}

#[test]
fn nondeterministic_objective_is_flagged() {
    use std::cell::Cell;
    let mut store = ParamStore::new();
    store.add("p", Tensor::scalar(1.0));
    let calls = Cell::new(0.0);
    let result = grad_check(
        &store,
        |tape, s| {
            calls.set(calls.get() + 1.0);
            Ok(tape.param(s, s.id("p").unwrap()).scale(calls.get()))
        },
        EPS,
    );
    assert!(matches!(result, Err(camse_core::Error::InvalidCheck(_))));
}

#[test]
fn matmul_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m, p) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
        let mut store = ParamStore::new();
        store.add("a", rand_tensor(&mut rng, &[n, m]));
        store.add("b", rand_tensor(&mut rng, &[m, p]));
        check(
            &store,
            |tape, s| {
                let a = tape.param(s, s.id("a").unwrap());
                let b = tape.param(s, s.id("b").unwrap());
                project(tape, a.matmul(b)?, seed)
            },
            "matmul",
        );
    }
}

#[test]
fn pointwise_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [dim(&mut rng), dim(&mut rng)];
        let mut store = ParamStore::new();
        store.add("x", rand_tensor(&mut rng, &shape).map(|v| 2.0 * v));
        check(
            &store,
            |tape, s| {
                let x = tape.param(s, s.id("x").unwrap());
                let y = x.tanh().add(x.sigmoid())?;
                project(tape, y, seed)
            },
            "pointwise",
        );
    }
}

#[test]
fn softmax_gradients_both_axes() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [dim(&mut rng), dim(&mut rng)];
        let mut store = ParamStore::new();
        store.add("x", rand_tensor(&mut rng, &shape).map(|v| 3.0 * v));
        for axis in [Axis::Columns, Axis::Rows] {
            check(
                &store,
                |tape, s| project(tape, tape.param(s, s.id("x").unwrap()).softmax(axis), seed),
                "softmax",
            );
        }
    }
}

#[test]
fn conv_window_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dim(&mut rng);
        let window = rng.gen_range(1..=3);
        let n = rng.gen_range(window..=6);
        let mut store = ParamStore::new();
        store.add("e", rand_tensor(&mut rng, &[n, d]));
        store.add("w", rand_tensor(&mut rng, &[window * d, d]).map(|v| 0.5 * v));
        store.add("b", rand_tensor(&mut rng, &[d]));
        check(
            &store,
            |tape, s| {
                let e = tape.param(s, s.id("e").unwrap());
                let out = conv_window(
                    e,
                    window,
                    tape.param(s, s.id("w").unwrap()),
                    tape.param(s, s.id("b").unwrap()),
                )?;
                assert_eq!(out.shape(), vec![n - window + 1, d]);
                project(tape, out, seed)
            },
            "conv_window",
        );
    }
}

fn lstm_store(rng: &mut ChaCha8Rng, d: usize, u: usize) -> ParamStore {
    let mut store = ParamStore::new();
    store.add("w_ih", rand_tensor(rng, &[4 * u, d]));
    store.add("w_hh", rand_tensor(rng, &[4 * u, u]));
    store.add("b", rand_tensor(rng, &[4 * u]));
    store
}

#[test]
fn lstm_cell_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, u) = (dim(&mut rng), dim(&mut rng));
        let mut store = lstm_store(&mut rng, d, u);
        store.add("x", rand_tensor(&mut rng, &[1, d]));
        store.add("h", rand_tensor(&mut rng, &[1, u]));
        store.add("c", rand_tensor(&mut rng, &[1, u]));
        check(
            &store,
            |tape, s| {
                let p = |name: &str| tape.param(s, s.id(name).unwrap());
                let (h, c) = lstm_cell(p("x"), p("h"), p("c"), p("w_ih"), p("w_hh"), p("b"))?;
                project(tape, tape.concat_cols(&[h, c])?, seed)
            },
            "lstm_cell",
        );
    }
}

#[test]
fn fused_lstm_matches_composed_cells() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, u, n) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
        let store = lstm_store(&mut rng, d, u);
        let x = rand_tensor(&mut rng, &[n, d]);
        for reverse in [false, true] {
            let fused_tape = Tape::new();
            let p = |name: &str| fused_tape.param(&store, store.id(name).unwrap());
            let xv = fused_tape.input(x.clone());
            let fused = xv.lstm(p("w_ih"), p("w_hh"), p("b"), reverse).unwrap();
            let fused_out = fused.value();
            let fused_grads = fused_tape.backward(project(&fused_tape, fused, seed).unwrap()).unwrap();

            let tape = Tape::new();
            let q = |name: &str| tape.param(&store, store.id(name).unwrap());
            let xv2 = tape.input(x.clone());
            let mut h = tape.constant(Tensor::zeros(&[1, u]));
            let mut c = tape.constant(Tensor::zeros(&[1, u]));
            let mut rows = vec![None; n];
            let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
            for t in order {
                let xt = xv2.slice_rows(t, t + 1).unwrap();
                let (h2, c2) = lstm_cell(xt, h, c, q("w_ih"), q("w_hh"), q("b")).unwrap();
                rows[t] = Some(h2);
                h = h2;
                c = c2;
            }
            let rows: Vec<Var> = rows.into_iter().map(Option::unwrap).collect();
            let flat = tape.stack(&rows).reshape(&[n, u]).unwrap();
            assert!(flat.value().max_abs_diff(&fused_out) < 1e-12);
            let grads = tape.backward(project(&tape, flat, seed).unwrap()).unwrap();
            for name in ["w_ih", "w_hh", "b"] {
                let id = store.id(name).unwrap();
                let diff = grads.param(id).unwrap().max_abs_diff(fused_grads.param(id).unwrap());
                assert!(diff < 1e-12, "{name}: {diff}");
            }
            let dx = grads.wrt(xv2).unwrap().max_abs_diff(fused_grads.wrt(xv).unwrap());
            assert!(dx < 1e-12);
        }
    }
}

#[test]
fn bilstm_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, u, n) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
        let mut store = ParamStore::new();
        let params = BiLstmParams::new(&mut store, "bi", d, u, &mut rng);
        store.add("x", rand_tensor(&mut rng, &[n, d]));
        check(
            &store,
            |tape, s| {
                let x = tape.param(s, s.id("x").unwrap());
                let out = bilstm(tape, s, &params, x)?;
                project(tape, out, seed)
            },
            "bilstm",
        );
    }
}

#[test]
fn bilstm_single_token_and_zero_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (d, u) = (3, 2);
    let mut store = ParamStore::new();
    let params = BiLstmParams::new(&mut store, "bi", d, u, &mut rng);
    let x = rand_tensor(&mut rng, &[1, d]);
    let tape = Tape::new();
    let out = bilstm(&tape, &store, &params, tape.constant(x.clone())).unwrap();
    let p = |id| tape.param(&store, id);
    let xv = tape.constant(x);
    let zero = tape.constant(Tensor::zeros(&[1, u]));
    let (hf, _) = lstm_cell(xv, zero, zero, p(params.fwd.w_ih), p(params.fwd.w_hh), p(params.fwd.b)).unwrap();
    let (hb, _) = lstm_cell(xv, zero, zero, p(params.bwd.w_ih), p(params.bwd.w_hh), p(params.bwd.b)).unwrap();
    let expected = tape.concat_cols(&[hf, hb]).unwrap();
    assert!(out.value().max_abs_diff(&expected.value()) < 1e-14);

    let mut zeroed = store.clone();
    for id in store.ids() {
        zeroed.value_mut(id).fill(0.0);
    }
    let tape = Tape::new();
    let out = bilstm(&tape, &zeroed, &params, tape.constant(rand_tensor(&mut rng, &[4, d]))).unwrap();
    assert_eq!(*out.value(), Tensor::zeros(&[4, 2 * u]));

    let tape = Tape::new();
    let empty = tape.constant(Tensor::zeros(&[0, d]));
    assert!(bilstm(&tape, &store, &params, empty).is_err());
}

#[test]
fn bilstm_reversal_matches_rerun() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (d, u, n) = (4, 3, 5);
    let mut store = ParamStore::new();
    let params = BiLstmParams::new(&mut store, "bi", d, u, &mut rng);
    let x = rand_tensor(&mut rng, &[n, d]);
    let reversed = Tensor::from_rows(&(0..n).rev().map(|t| x.row(t).to_vec()).collect::<Vec<_>>()).unwrap();

    let tape = Tape::new();
    let out = bilstm(&tape, &store, &params, tape.constant(x)).unwrap().value();
    let out_rev = bilstm(&tape, &store, &params, tape.constant(reversed.clone())).unwrap().value();
    // Brute force: run each direction's cell by hand over the reversed input.
    let fwd_on_rev = params.fwd.run(&tape, &store, tape.constant(reversed.clone()), false).unwrap().value();
    let bwd_on_rev = params.bwd.run(&tape, &store, tape.constant(reversed), true).unwrap().value();
    for t in 0..n {
        assert_eq!(&out_rev.row(t)[..u], fwd_on_rev.row(t));
        assert_eq!(&out_rev.row(t)[u..], bwd_on_rev.row(t));
    }
    // The backward direction over the original input, read right to left,
    // is not the forward direction's output: the halves use different weights.
    assert!(out.row(0)[u..] != out_rev.row(n - 1)[..u]);
}

#[test]
fn cosine_and_pair_mlp_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, m) = (rng.gen_range(2..=6), dim(&mut rng));
        let mut store = ParamStore::new();
        store.add("t1", rand_tensor(&mut rng, &[r, m]));
        store.add("t2", rand_tensor(&mut rng, &[r, m]));
        store.add("w", rand_tensor(&mut rng, &[r * (r - 1), 2 * m]));
        store.add("b", rand_tensor(&mut rng, &[r * (r - 1)]));
        check(
            &store,
            |tape, s| {
                let p = |name: &str| tape.param(s, s.id(name).unwrap());
                project(tape, p("t1").row_cosine(p("t2"))?, seed)
            },
            "cosine",
        );
        check(
            &store,
            |tape, s| {
                let p = |name: &str| tape.param(s, s.id(name).unwrap());
                let logits = p("t1").pair_logits(p("t2"), p("w"), Some(p("b")))?;
                project(tape, logits.sigmoid(), seed)
            },
            "sigmoid-mlp",
        );
    }
}

#[test]
fn cross_entropy_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..=6);
        let gold = rng.gen_range(0..n);
        let mut store = ParamStore::new();
        store.add("s", rand_tensor(&mut rng, &[n, 1]).map(|v| 3.0 * v));
        check(
            &store,
            |tape, s| tape.param(s, s.id("s").unwrap()).cross_entropy(gold),
            "cross_entropy",
        );
    }
}
