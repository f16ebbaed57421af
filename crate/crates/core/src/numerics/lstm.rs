//! Raw LSTM recurrence kernels shared by the tape's fused sequence op.
//!
//! Weight layout: `w_ih` is `4u x d`, `w_hh` is `4u x u`, `b` has `4u`
//! entries. The four row blocks are, in order, input gate, forget gate,
//! candidate, output gate.

use super::tensor::{dot, sigmoid};

pub struct LstmWeights<'a> {
    pub w_ih: &'a [f64],
    pub w_hh: &'a [f64],
    pub b: &'a [f64],
    pub input: usize,
    pub hidden: usize,
}

/// Everything the backward pass needs, indexed by sequence position.
#[derive(Clone, Debug)]
pub struct LstmTrace {
    /// `n x u` hidden states.
    pub h: Vec<f64>,
    /// `n x u` cell states.
    pub c: Vec<f64>,
    /// `n x 4u` activated gates `[i, f, g, o]`.
    pub gates: Vec<f64>,
    pub reverse: bool,
    h0: Vec<f64>,
    c0: Vec<f64>,
}

impl LstmTrace {
    /// Hidden and cell state after the last processed step.
    pub fn final_state(&self) -> (&[f64], &[f64]) {
        let u = self.h0.len();
        let n = self.h.len() / u.max(1);
        if n == 0 {
            return (&self.h0, &self.c0);
        }
        let p = if self.reverse { 0 } else { n - 1 };
        (&self.h[p * u..(p + 1) * u], &self.c[p * u..(p + 1) * u])
    }
}

fn order(n: usize, reverse: bool) -> Box<dyn Iterator<Item = usize>> {
    if reverse {
        Box::new((0..n).rev())
    } else {
        Box::new(0..n)
    }
}

/// Single LSTM step on raw slices; returns `(h, c)`.
pub fn lstm_step(w: &LstmWeights<'_>, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let u = w.hidden;
    let mut gates = vec![0.0; 4 * u];
    let mut h = vec![0.0; u];
    let mut c = vec![0.0; u];
    step_into(w, x, h_prev, c_prev, &mut gates, &mut h, &mut c);
    (h, c)
}

fn step_into(
    w: &LstmWeights<'_>,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    gates: &mut [f64],
    h: &mut [f64],
    c: &mut [f64],
) {
    let (d, u) = (w.input, w.hidden);
    for j in 0..4 * u {
        let a = w.b[j]
            + dot(&w.w_ih[j * d..(j + 1) * d], x)
            + dot(&w.w_hh[j * u..(j + 1) * u], h_prev);
        gates[j] = if (2 * u..3 * u).contains(&j) {
            a.tanh()
        } else {
            sigmoid(a)
        };
    }
    for k in 0..u {
        let (i, f, g, o) = (gates[k], gates[u + k], gates[2 * u + k], gates[3 * u + k]);
        c[k] = f * c_prev[k] + i * g;
        h[k] = o * c[k].tanh();
    }
}

/// Runs the recurrence over `n` rows of `x` (`n x d`), left to right or
/// right to left. Output rows stay in position order either way.
pub fn lstm_forward(
    w: &LstmWeights<'_>,
    x: &[f64],
    n: usize,
    reverse: bool,
    h0: Option<&[f64]>,
    c0: Option<&[f64]>,
) -> LstmTrace {
    let (d, u) = (w.input, w.hidden);
    let h0 = h0.map_or_else(|| vec![0.0; u], <[f64]>::to_vec);
    let c0 = c0.map_or_else(|| vec![0.0; u], <[f64]>::to_vec);
    let mut trace = LstmTrace {
        h: vec![0.0; n * u],
        c: vec![0.0; n * u],
        gates: vec![0.0; n * 4 * u],
        reverse,
        h0,
        c0,
    };
    let mut prev: Option<usize> = None;
    for p in order(n, reverse) {
        let (h_prev, c_prev) = match prev {
            Some(q) => (
                trace.h[q * u..(q + 1) * u].to_vec(),
                trace.c[q * u..(q + 1) * u].to_vec(),
            ),
            None => (trace.h0.clone(), trace.c0.clone()),
        };
        let gates = &mut trace.gates[p * 4 * u..(p + 1) * 4 * u];
        let mut h = vec![0.0; u];
        let mut c = vec![0.0; u];
        step_into(w, &x[p * d..(p + 1) * d], &h_prev, &c_prev, gates, &mut h, &mut c);
        trace.h[p * u..(p + 1) * u].copy_from_slice(&h);
        trace.c[p * u..(p + 1) * u].copy_from_slice(&c);
        prev = Some(p);
    }
    trace
}

pub struct LstmGrads {
    pub dx: Vec<f64>,
    pub dw_ih: Vec<f64>,
    pub dw_hh: Vec<f64>,
    pub db: Vec<f64>,
}

/// Backpropagation through time given `dh` (`n x u`) on every output row.
/// The initial state is treated as a constant.
pub fn lstm_backward(w: &LstmWeights<'_>, x: &[f64], trace: &LstmTrace, dh_out: &[f64]) -> LstmGrads {
    let (d, u) = (w.input, w.hidden);
    let n = trace.h.len() / u;
    let mut g = LstmGrads {
        dx: vec![0.0; n * d],
        dw_ih: vec![0.0; 4 * u * d],
        dw_hh: vec![0.0; 4 * u * u],
        db: vec![0.0; 4 * u],
    };
    let steps: Vec<usize> = order(n, trace.reverse).collect();
    let mut dh_next = vec![0.0; u];
    let mut dc_next = vec![0.0; u];
    let mut da = vec![0.0; 4 * u];
    for (s, &p) in steps.iter().enumerate().rev() {
        let (h_prev, c_prev): (&[f64], &[f64]) = if s == 0 {
            (&trace.h0, &trace.c0)
        } else {
            let q = steps[s - 1];
            (&trace.h[q * u..(q + 1) * u], &trace.c[q * u..(q + 1) * u])
        };
        let gates = &trace.gates[p * 4 * u..(p + 1) * 4 * u];
        let c = &trace.c[p * u..(p + 1) * u];
        for k in 0..u {
            let (i, f, gg, o) = (gates[k], gates[u + k], gates[2 * u + k], gates[3 * u + k]);
            let dh = dh_out[p * u + k] + dh_next[k];
            let tc = c[k].tanh();
            let dc = dh * o * (1.0 - tc * tc) + dc_next[k];
            da[k] = dc * gg * i * (1.0 - i);
            da[u + k] = dc * c_prev[k] * f * (1.0 - f);
            da[2 * u + k] = dc * i * (1.0 - gg * gg);
            da[3 * u + k] = dh * tc * o * (1.0 - o);
            dc_next[k] = dc * f;
        }
        let xp = &x[p * d..(p + 1) * d];
        let dx = &mut g.dx[p * d..(p + 1) * d];
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..4 * u {
            let a = da[j];
            if a == 0.0 {
                continue;
            }
            g.db[j] += a;
            let wi = &w.w_ih[j * d..(j + 1) * d];
            let dwi = &mut g.dw_ih[j * d..(j + 1) * d];
            for k in 0..d {
                dwi[k] += a * xp[k];
                dx[k] += a * wi[k];
            }
            let wh = &w.w_hh[j * u..(j + 1) * u];
            let dwh = &mut g.dw_hh[j * u..(j + 1) * u];
            for k in 0..u {
                dwh[k] += a * h_prev[k];
                dh_next[k] += a * wh[k];
            }
        }
    }
    g
}
