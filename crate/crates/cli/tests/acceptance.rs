//! Acceptance suite: one PASS/FAIL line per criterion. The process exits
//! non-zero only when a gating criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use camse_cli::cmd_train;
use camse_core::config::RunConfig;
use camse_core::encoder::{CamseConfig, CamseEncoder};
use camse_core::numerics::{
    bilstm, conv_window, grad_check, lstm_cell, uniform, Axis, BiLstmParams, Mode, ParamStore, Tape, Var,
};
use camse_core::qa::{
    baseline_accuracy, evaluate, loss, loss_value, tokenize_records, train, CamseModel, ModelConfig, QaInstance,
    TrainConfig,
};
use camse_core::retrieval::{Bm25Params, InvertedIndex};
use camse_core::scoring::{aggregate_scale, gate, Scorer, ScoringConfig};
use camse_core::synth::{gen_corpus, CorpusKind, SynthConfig};
use camse_core::text::{random_embeddings, tokenize, TokenSequence, Vocabulary};
use camse_core::Result;
use rand::rngs::mock::StepRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let criteria: Vec<(usize, &str, bool, fn() -> Outcome)> = vec![
        (1, "results caveat", false, results_caveat),
        (2, "gradient correctness", true, gradient_correctness),
        (3, "attention normalization", true, attention_normalization),
        (4, "mask isolation", true, mask_isolation),
        (5, "gate dependence", true, gate_dependence),
        (6, "oracle equivalence", true, oracle_equivalence),
        (7, "synthetic learnability (entity)", true, entity_learnability),
        (8, "association diagnostic", false, association_diagnostic),
        (9, "determinism", true, determinism),
        (10, "protocol conformance", true, protocol_conformance),
    ];
    let mut gating_failures = 0;
    for (id, name, gating, f) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|e| outcome(false, format!("panicked: {}", panic_message(&e))));
        let tag = if result.pass { "PASS" } else { "FAIL" };
        let note = if gating { "" } else { " (non-gating)" };
        println!(
            "[{tag}] {id:>2} {name}{note}: {} [{:.1}s]",
            result.detail,
            start.elapsed().as_secs_f64()
        );
        if gating && !result.pass {
            gating_failures += 1;
        }
    }
    if gating_failures > 0 {
        println!("{gating_failures} gating criteria failed");
        std::process::exit(1);
    }
}

fn panic_message(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

fn results_caveat() -> Outcome {
    outcome(
        true,
        "informational; accuracies on the original private datasets cannot be measured, criteria 2-10 substitute",
    )
}

// ---- shared fixtures ----

fn tiny_encoder() -> CamseConfig {
    CamseConfig {
        scales: 2,
        subspaces: 3,
        embed_dim: 8,
        context_hidden: 4,
        attention_hidden: Some(4),
        attention_dim: 5,
        dropout: 0.0,
    }
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        encoder: tiny_encoder(),
        scoring: ScoringConfig {
            gate_hidden: 4,
            ..ScoringConfig::default()
        },
        ..ModelConfig::default()
    }
}

fn tiny_vocab() -> Vocabulary {
    Vocabulary::from_tokens((0..20).map(|i| format!("t{i}"))).unwrap()
}

fn tiny_model(seed: u64) -> CamseModel {
    let v = tiny_vocab();
    let table = random_embeddings(&v, 8, 3);
    CamseModel::new(tiny_model_config(), v, &table, seed).unwrap()
}

fn seq(rng: &mut ChaCha8Rng, v: &Vocabulary, n: usize) -> TokenSequence {
    let words: Vec<String> = (0..n).map(|_| format!("t{}", rng.gen_range(0..20))).collect();
    tokenize(&words.join(" "), v).unwrap()
}

/// Question length 6, one-token choices, `docs` evidence documents of length 6.
fn instance(seed: u64, n_c: usize, docs: usize) -> QaInstance {
    let v = tiny_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    QaInstance {
        id: format!("i{seed}"),
        question: seq(&mut rng, &v, 6),
        choices: (0..n_c).map(|_| seq(&mut rng, &v, 1)).collect(),
        evidence: (0..n_c).map(|_| (0..docs).map(|_| seq(&mut rng, &v, 6)).collect()).collect(),
        answer: Some(rng.gen_range(0..n_c)),
    }
}

fn pair_score(model: &CamseModel, statement: &TokenSequence, doc: &TokenSequence) -> f64 {
    let tape = Tape::new();
    let mut rng = StepRng::new(0, 0);
    let s = model.encode(&tape, statement, Mode::Eval, &mut rng).unwrap();
    let d = model.encode(&tape, doc, Mode::Eval, &mut rng).unwrap();
    model.score_pair(&tape, &s, &d).unwrap().score.item()
}

// ---- 2: gradients ----

const EPS: f64 = 1e-5;
const SEEDS: u64 = 20;

fn project<'t>(tape: &'t Tape, out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let w = uniform(&mut rng, &out.shape(), 1.0);
    out.mul(tape.constant(w)).map(|v| v.sum())
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=6)
}

fn err(store: &ParamStore, f: impl for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>, eps: f64) -> f64 {
    grad_check(store, f, eps).unwrap().max_rel_error
}

fn p<'t>(tape: &'t Tape, s: &ParamStore, name: &str) -> Var<'t> {
    tape.param(s, s.id(name).unwrap())
}

/// Worst relative error of one primitive over all seeds.
fn primitive_error(name: &str) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let e = match name {
            "matmul" => {
                let (n, m, k) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
                store.add("a", uniform(&mut rng, &[n, m], 1.0));
                store.add("b", uniform(&mut rng, &[m, k], 1.0));
                err(&store, |t, s| project(t, p(t, s, "a").matmul(p(t, s, "b"))?, seed), EPS)
            }
            "pointwise" => {
                let shape = [dim(&mut rng), dim(&mut rng)];
                store.add("x", uniform(&mut rng, &shape, 2.0));
                err(&store, |t, s| project(t, p(t, s, "x").tanh().add(p(t, s, "x").sigmoid())?, seed), EPS)
            }
            "softmax_axis" => {
                let shape = [dim(&mut rng), dim(&mut rng)];
                store.add("x", uniform(&mut rng, &shape, 3.0));
                let a = err(&store, |t, s| project(t, p(t, s, "x").softmax(Axis::Columns), seed), EPS);
                let b = err(&store, |t, s| project(t, p(t, s, "x").softmax(Axis::Rows), seed), EPS);
                a.max(b)
            }
            "conv_window" => {
                let d = dim(&mut rng);
                let window = rng.gen_range(1..=3);
                let n = rng.gen_range(window..=6);
                store.add("e", uniform(&mut rng, &[n, d], 1.0));
                store.add("w", uniform(&mut rng, &[window * d, d], 0.5));
                store.add("b", uniform(&mut rng, &[d], 1.0));
                err(
                    &store,
                    |t, s| project(t, conv_window(p(t, s, "e"), window, p(t, s, "w"), p(t, s, "b"))?, seed),
                    EPS,
                )
            }
            "lstm_cell" => {
                let (d, u) = (dim(&mut rng), dim(&mut rng));
                store.add("w_ih", uniform(&mut rng, &[4 * u, d], 1.0));
                store.add("w_hh", uniform(&mut rng, &[4 * u, u], 1.0));
                store.add("b", uniform(&mut rng, &[4 * u], 1.0));
                store.add("x", uniform(&mut rng, &[1, d], 1.0));
                store.add("h", uniform(&mut rng, &[1, u], 1.0));
                store.add("c", uniform(&mut rng, &[1, u], 1.0));
                err(
                    &store,
                    |t, s| {
                        let q = |n: &str| p(t, s, n);
                        let (h, c) = lstm_cell(q("x"), q("h"), q("c"), q("w_ih"), q("w_hh"), q("b"))?;
                        project(t, t.concat_cols(&[h, c])?, seed)
                    },
                    EPS,
                )
            }
            "bilstm" => {
                let (d, u, n) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
                let params = BiLstmParams::new(&mut store, "bi", d, u, &mut rng);
                store.add("x", uniform(&mut rng, &[n, d], 1.0));
                err(&store, |t, s| project(t, bilstm(t, s, &params, p(t, s, "x"))?, seed), EPS)
            }
            "cosine" | "sigmoid-mlp" => {
                let (r, m) = (rng.gen_range(2..=6), dim(&mut rng));
                store.add("t1", uniform(&mut rng, &[r, m], 1.0));
                store.add("t2", uniform(&mut rng, &[r, m], 1.0));
                store.add("w", uniform(&mut rng, &[r * (r - 1), 2 * m], 1.0));
                store.add("b", uniform(&mut rng, &[r * (r - 1)], 1.0));
                if name == "cosine" {
                    err(&store, |t, s| project(t, p(t, s, "t1").row_cosine(p(t, s, "t2"))?, seed), EPS)
                } else {
                    err(
                        &store,
                        |t, s| {
                            let logits = p(t, s, "t1").pair_logits(p(t, s, "t2"), p(t, s, "w"), Some(p(t, s, "b")))?;
                            project(t, logits.sigmoid(), seed)
                        },
                        EPS,
                    )
                }
            }
            "gate" => {
                let (r, m, h) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..6));
                let mut enc_store = ParamStore::new();
                let scorer = Scorer::new(
                    ScoringConfig {
                        gate_hidden: 4,
                        ..ScoringConfig::default()
                    },
                    &tiny_encoder(),
                    &mut enc_store,
                    &mut rng,
                )
                .unwrap();
                let t1 = store.add("t1", uniform(&mut rng, &[r, m], 1.0));
                let mut params = scorer.scales[0];
                params.gate_w1 = store.add("w1", uniform(&mut rng, &[h, r * m], 1.0));
                params.gate_w2 = store.add("w2", uniform(&mut rng, &[r * r, h], 1.0));
                err(&store, |t, s| project(t, gate(t, s, &params, t.param(s, t1))?, seed), EPS)
            }
            "aggregate" => {
                let r = rng.gen_range(1..5);
                store.add("diag", uniform(&mut rng, &[r, 1], 1.0));
                store.add("sas", uniform(&mut rng, &[r, r], 1.0));
                store.add("gate", uniform(&mut rng, &[r, r], 1.0));
                let (c1, c2) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0));
                err(
                    &store,
                    |t, s| {
                        let (o1, o2) = aggregate_scale(p(t, s, "diag"), p(t, s, "sas"), p(t, s, "gate"))?;
                        let x = o1.scale(c1).add(o2.scale(c2))?;
                        x.mul(x)
                    },
                    EPS,
                )
            }
            "loss" => {
                let n = rng.gen_range(2..=6);
                let gold = rng.gen_range(0..n);
                store.add("s", uniform(&mut rng, &[n, 1], 3.0));
                err(&store, |t, s| p(t, s, "s").cross_entropy(gold), EPS)
            }
            other => panic!("unknown primitive {other}"),
        };
        worst = worst.max(e);
    }
    worst
}

/// Full loss of the tiny model on one instance (n_c = 3, two documents each).
fn full_model_error(eps: f64) -> f64 {
    let cfg = tiny_model_config();
    let v = tiny_vocab();
    let model = CamseModel::new(cfg.clone(), v.clone(), &random_embeddings(&v, 8, 3), 21).unwrap();
    let inst = instance(22, 3, 2);
    err(
        &model.store,
        |tape, s| {
            let m = CamseModel::from_parts(cfg.clone(), v.clone(), s.clone())?;
            let scores: Vec<_> = m
                .instance_scores(tape, &inst, Mode::Eval, &mut StepRng::new(0, 0))?
                .iter()
                .map(|c| c.score)
                .collect();
            loss(tape, &scores, inst.answer.unwrap())
        },
        eps,
    )
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let names = [
        "matmul",
        "pointwise",
        "softmax_axis",
        "conv_window",
        "lstm_cell",
        "bilstm",
        "cosine",
        "sigmoid-mlp",
        "gate",
        "aggregate",
        "loss",
    ];
    let mut worst = (0.0f64, "");
    for name in names {
        let e = primitive_error(name);
        if e > worst.0 {
            worst = (e, name);
        }
    }
    let full = full_model_error(1e-4);
    let full_fine = full_model_error(1e-5);
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.0 < 1e-4 && full < 1e-3 && secs < 120.0;
    outcome(
        pass,
        format!(
            "{} primitives x {SEEDS} seeds at eps 1e-5, worst {:.2e} ({}); full model {:.2e} at eps 1e-4 \
             ({:.2e} at eps 1e-5, roundoff-limited); {secs:.1}s",
            names.len(),
            worst.0,
            worst.1,
            full,
            full_fine
        ),
    )
}

// ---- 3-5: encoder and scoring contracts ----

fn attention_normalization() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = CamseConfig {
            scales: rng.gen_range(1..=3),
            subspaces: rng.gen_range(1..=6),
            ..tiny_encoder()
        };
        let mut store = ParamStore::new();
        let enc = CamseEncoder::new(cfg, &mut store, &mut rng).unwrap();
        let n = rng.gen_range(3..=10);
        let words = uniform(&mut rng, &[n, 8], 2.0);
        let tape = Tape::new();
        let out = enc
            .encode(&tape, &store, tape.constant(words), Mode::Eval, &mut StepRng::new(0, 0))
            .unwrap();
        for s in &out.scales {
            let a = s.attention.value();
            for j in 0..a.cols() {
                let total: f64 = (0..a.rows()).map(|t| a.at(t, j)).sum();
                worst = worst.max((total - 1.0).abs());
            }
        }
    }
    outcome(worst < 1e-6, format!("100 random models, max |column sum - 1| = {worst:.1e}"))
}

fn mask_isolation() -> Outcome {
    let mut leaks = 0;
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rng.gen_range(2..7);
        let diag_v = uniform(&mut rng, &[r, 1], 1.0);
        let sas_v = uniform(&mut rng, &[r, r], 1.0);
        let g_v = uniform(&mut rng, &[r, r], 1.0);

        let tape = Tape::new();
        let (diag, sas) = (tape.input(diag_v.clone()), tape.input(sas_v.clone()));
        let (o_sms, _) = aggregate_scale(diag, sas, tape.constant(g_v.clone())).unwrap();
        let grads = tape.backward(o_sms).unwrap();
        if let Some(gs) = grads.wrt(sas) {
            leaks += (0..r * r).filter(|&i| i / r != i % r && gs.data()[i] != 0.0).count();
        }

        let tape = Tape::new();
        let (diag, sas) = (tape.input(diag_v), tape.input(sas_v));
        let (_, o_sas) = aggregate_scale(diag, sas, tape.constant(g_v)).unwrap();
        let grads = tape.backward(o_sas).unwrap();
        if let Some(gd) = grads.wrt(diag) {
            leaks += gd.data().iter().filter(|&&x| x != 0.0).count();
        }
    }
    outcome(leaks == 0, format!("50 random cases, {leaks} non-zero cross-mask gradient entries"))
}

fn gate_dependence() -> Outcome {
    let mut mismatches = 0;
    let mut cases = 0;
    for seed in 0..10 {
        let model = tiny_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let v = tiny_vocab();
        let statement = seq(&mut rng, &v, 7);
        let mut reference: Option<Vec<Vec<u64>>> = None;
        for _ in 0..5 {
            let n = rng.gen_range(2..9);
            let doc = seq(&mut rng, &v, n);
            let tape = Tape::new();
            let mut step = StepRng::new(0, 0);
            let s = model.encode(&tape, &statement, Mode::Eval, &mut step).unwrap();
            let d = model.encode(&tape, &doc, Mode::Eval, &mut step).unwrap();
            let pack = model.score_pair(&tape, &s, &d).unwrap().pack();
            let bits: Vec<Vec<u64>> =
                pack.scales.iter().map(|p| p.gate.iter().map(|g| g.to_bits()).collect()).collect();
            match &reference {
                None => reference = Some(bits),
                Some(r) => {
                    cases += 1;
                    mismatches += (*r != bits) as usize;
                }
            }
        }
    }
    outcome(
        mismatches == 0,
        format!("{cases} document swaps over 10 models, {mismatches} gate differences"),
    )
}

// ---- 6: oracles ----

fn bm25_brute_force(corpus: &[Vec<String>], query: &[String], p: Bm25Params) -> Vec<(usize, f64)> {
    let n = corpus.len() as f64;
    let avg = corpus.iter().map(|d| d.len() as f64).sum::<f64>() / n;
    let mut out = Vec::new();
    for (i, doc) in corpus.iter().enumerate() {
        let mut score = 0.0;
        let mut hit = false;
        for q in query {
            let df = corpus.iter().filter(|d| d.contains(q)).count() as f64;
            let tf = doc.iter().filter(|t| *t == q).count() as f64;
            if df == 0.0 || tf == 0.0 {
                continue;
            }
            hit = true;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            score += idf * tf * (p.k1 + 1.0) / (tf + p.k1 * (1.0 - p.b + p.b * doc.len() as f64 / avg));
        }
        if hit && score > 0.0 {
            out.push((i, score));
        }
    }
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    out
}

fn oracle_equivalence() -> Outcome {
    let p = Bm25Params::default();
    let mut bm25_mismatch = 0;
    let mut queries = 0;
    for seed in 0..30 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let docs = rng.gen_range(1..=100);
        let corpus: Vec<Vec<String>> = (0..docs)
            .map(|_| (0..rng.gen_range(1..=15)).map(|_| format!("w{}", rng.gen_range(0..40))).collect())
            .collect();
        let index = InvertedIndex::build(&corpus).unwrap();
        for _ in 0..5 {
            queries += 1;
            let q: Vec<String> = (0..rng.gen_range(1..6)).map(|_| format!("w{}", rng.gen_range(0..45))).collect();
            let mut expect = bm25_brute_force(&corpus, &q, p);
            let got: Vec<(usize, f64)> = index.bm25(&q, p).iter().map(|s| (s.doc, s.score)).collect();
            bm25_mismatch += (got != expect) as usize;
            let k = rng.gen_range(1..=12);
            expect.truncate(k);
            let top: Vec<(usize, f64)> = index.top_k(&q, k, p).unwrap().iter().map(|s| (s.doc, s.score)).collect();
            bm25_mismatch += (top != expect) as usize;
        }
    }

    let mut cand_err = 0.0f64;
    for seed in 0..5 {
        let model = tiny_model(seed);
        let v = tiny_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let statement = seq(&mut rng, &v, 7);
        let docs: Vec<TokenSequence> = (0..rng.gen_range(1..13)).map(|_| seq(&mut rng, &v, 5)).collect();
        let tape = Tape::new();
        let got = model
            .candidate_score(&tape, &statement, &docs, Mode::Eval, &mut StepRng::new(0, 0))
            .unwrap()
            .score
            .item();
        let expect: f64 = docs.iter().take(10).map(|d| pair_score(&model, &statement, d)).sum();
        cand_err = cand_err.max((got - expect).abs());
    }

    let mut agg_mismatch = 0;
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rng.gen_range(1..7);
        let diag = uniform(&mut rng, &[r, 1], 1.0);
        let mut sas = uniform(&mut rng, &[r, r], 1.0).map(f64::abs);
        let g = uniform(&mut rng, &[r, r], 1.0).map(f64::abs);
        for u in 0..r {
            sas.data_mut()[u * r + u] = 0.0;
        }
        let tape = Tape::new();
        let (o_sms, o_sas) =
            aggregate_scale(tape.constant(diag.clone()), tape.constant(sas.clone()), tape.constant(g.clone())).unwrap();
        let (mut e_sms, mut e_sas) = (0.0, 0.0);
        for u in 0..r {
            for v in 0..r {
                if u == v {
                    e_sms += diag.data()[u] * g.at(u, u);
                } else {
                    e_sas += sas.at(u, v) * g.at(u, v);
                }
            }
        }
        agg_mismatch += (o_sms.item() != e_sms || o_sas.item() != e_sas) as usize;
    }
    outcome(
        bm25_mismatch == 0 && cand_err < 1e-9 && agg_mismatch == 0,
        format!(
            "bm25/top_k {bm25_mismatch} mismatches in {} comparisons; candidate_score max error {cand_err:.1e}; \
             aggregate {agg_mismatch}/50 inexact",
            2 * queries
        ),
    )
}

// ---- 7, 8: synthetic corpora ----

/// Model used on the synthetic corpora: three scales, eight subspaces,
/// context width 32.
fn synth_model_config(use_sas: bool) -> ModelConfig {
    ModelConfig {
        encoder: CamseConfig {
            scales: 3,
            subspaces: 8,
            embed_dim: 32,
            context_hidden: 32,
            attention_hidden: None,
            attention_dim: 32,
            dropout: 0.2,
        },
        scoring: ScoringConfig {
            gate_hidden: 32,
            sas_bias: true,
            use_sas,
        },
        ..ModelConfig::default()
    }
}

fn synth_train_config(epochs: usize) -> TrainConfig {
    let mut tc = TrainConfig::default();
    tc.epochs = epochs;
    tc.adam.learning_rate = 5e-3;
    tc
}

/// Trains without a dev set and returns test accuracy of the final model.
fn train_on(kind: CorpusKind, use_sas: bool, epochs: usize) -> (f64, f64) {
    let corpus = gen_corpus(kind, &SynthConfig::default()).unwrap();
    let train_set = tokenize_records(&corpus.train, &corpus.vocab).unwrap();
    let test_set = tokenize_records(&corpus.test, &corpus.vocab).unwrap();
    let mc = synth_model_config(use_sas);
    let baseline = baseline_accuracy(&test_set, &corpus.table, &mc.limits).unwrap();
    let mut model = CamseModel::new(mc, corpus.vocab.clone(), &corpus.table, 1).unwrap();
    train(&mut model, &train_set, &[], &synth_train_config(epochs), |_| Ok(())).unwrap();
    (evaluate(&model, &test_set).unwrap().accuracy, baseline)
}

const ENTITY_EPOCHS: usize = 15;

fn entity_learnability() -> Outcome {
    let start = Instant::now();
    let (acc, baseline) = train_on(CorpusKind::Entity, true, ENTITY_EPOCHS);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        acc >= 0.90 && baseline <= 0.60 && secs < 600.0,
        format!(
            "test accuracy {:.1}% after {ENTITY_EPOCHS} epochs (target >= 90%), mean-cosine baseline {:.1}% \
             (target <= 60%), {secs:.0}s single-threaded",
            100.0 * acc,
            100.0 * baseline
        ),
    )
}

const ASSOCIATION_EPOCHS: usize = 12;

fn association_diagnostic() -> Outcome {
    let (full, _) = train_on(CorpusKind::Association, true, ASSOCIATION_EPOCHS);
    let (sms_only, _) = train_on(CorpusKind::Association, false, ASSOCIATION_EPOCHS);
    let gap = 100.0 * (full - sms_only);
    outcome(
        gap >= 5.0,
        format!(
            "full {:.1}% vs matching-only {:.1}% after {ASSOCIATION_EPOCHS} epochs, gap {gap:+.1} points \
             (target >= +5)",
            100.0 * full,
            100.0 * sms_only
        ),
    )
}

// ---- 9: determinism ----

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::from_toml(
        r#"
        seed = 7
        [synth]
        train_size = 40
        test_size = 10
        embed_dim = 8
        [model.encoder]
        scales = 2
        subspaces = 4
        embed_dim = 8
        context_hidden = 4
        attention_dim = 4
        [model.scoring]
        gate_hidden = 4
        [train]
        epochs = 3
        "#,
    )
    .unwrap();
    camse_cli::cmd_synth(CorpusKind::Entity, &cfg, dir.path()).unwrap();
    cfg.train.seed = cfg.train_seed();
    cfg.paths.embeddings = Some(dir.path().join("embeddings.txt"));
    cfg.paths.train = Some(dir.path().join("train.jsonl"));
    cfg.paths.dev = Some(dir.path().join("test.jsonl"));
    cfg.paths.checkpoint = Some(dir.path().join("model.ckpt"));
    cfg.paths.metrics = Some(dir.path().join("metrics.jsonl"));
    let mut runs = Vec::new();
    for _ in 0..2 {
        cmd_train(&cfg).unwrap();
        let metrics = std::fs::read(cfg.paths.metrics.as_ref().unwrap()).unwrap();
        let ckpt = std::fs::read(cfg.paths.checkpoint.as_ref().unwrap()).unwrap();
        runs.push((metrics, ckpt));
    }
    let same_metrics = runs[0].0 == runs[1].0;
    let same_ckpt = runs[0].1 == runs[1].1;
    outcome(
        same_metrics && same_ckpt && !runs[0].0.is_empty(),
        format!(
            "metrics log identical: {same_metrics} ({} bytes); checkpoint identical: {same_ckpt} ({} bytes)",
            runs[0].0.len(),
            runs[0].1.len()
        ),
    )
}

// ---- 10: protocol ----

fn protocol_conformance() -> Outcome {
    let mut problems = Vec::new();
    let defaults = ModelConfig::default();
    if defaults.limits.evidence_cap != 10 {
        problems.push("evidence cap is not 10".to_string());
    }
    if defaults.limits.max_statement_len != 100 || defaults.limits.max_document_len != 100 {
        problems.push("default truncation is not 100".to_string());
    }

    let model = tiny_model(6);
    let inst = instance(6, 3, 12);
    let scores = model.score_instance(&inst).unwrap();
    for (c, choice) in inst.choices.iter().enumerate() {
        let statement = model.statement(&inst.question, choice).unwrap();
        let capped: f64 = inst.evidence[c][..10].iter().map(|d| pair_score(&model, &statement, d)).sum();
        if (scores[c] - capped).abs() > 1e-9 {
            problems.push(format!("choice {c} does not use exactly the first 10 documents"));
        }
    }

    let v = tiny_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let long = seq(&mut rng, &v, 120);
    let choice = seq(&mut rng, &v, 1);
    if model.statement(&long, &choice).unwrap().len() != 100 || model.document(&long).unwrap().len() != 100 {
        problems.push("100-token truncation not applied".into());
    }
    let mut cfg70 = tiny_model_config();
    cfg70.limits.max_statement_len = 70;
    cfg70.limits.max_document_len = 70;
    let m70 = CamseModel::new(cfg70, v.clone(), &random_embeddings(&v, 8, 3), 1).unwrap();
    if m70.statement(&long, &choice).unwrap().len() != 70 || m70.document(&long).unwrap().len() != 70 {
        problems.push("70-token truncation not applied".into());
    }

    let mut worst_ln = 0.0f64;
    for n_c in [2, 3, 4, 5, 10, 98] {
        for gold in [0, n_c - 1] {
            let l = loss_value(&vec![0.37; n_c], gold).unwrap();
            worst_ln = worst_ln.max((l - (n_c as f64).ln()).abs());
        }
    }
    if worst_ln >= 1e-9 {
        problems.push(format!("uniform loss deviates from ln n_c by {worst_ln:.1e}"));
    }
    let detail = if problems.is_empty() {
        format!("cap 10 and truncation 100/70 enforced; uniform loss = ln n_c within {worst_ln:.1e}")
    } else {
        problems.join("; ")
    };
    outcome(problems.is_empty(), detail)
}
