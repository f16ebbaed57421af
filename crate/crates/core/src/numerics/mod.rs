//! Tensors, reverse-mode autodiff, recurrent layers, and the optimizer.

mod adam;
mod gradcheck;
mod init;
pub mod lstm;
mod param;
mod tape;
mod tensor;

use rand::Rng;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, GradCheckReport};
pub use init::{uniform, xavier_uniform};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{
    check_dropout_rate, lstm_cell, off_diagonal_pairs, softmax_values, Axis, Gradients, Mode,
    Pointwise, Tape, Var, COSINE_EPS,
};
pub use tensor::{sigmoid, Tensor};

use crate::error::Result;

/// Weights of one LSTM direction, gate blocks `[input, forget, candidate, output]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    pub fn new(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let w_ih = store.add(format!("{prefix}.w_ih"), xavier_uniform(rng, 4 * hidden, input));
        let w_hh = store.add(format!("{prefix}.w_hh"), xavier_uniform(rng, 4 * hidden, hidden));
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        let b = store.add(format!("{prefix}.b"), bias);
        LstmParams { w_ih, w_hh, b, hidden }
    }

    pub fn run<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>, reverse: bool) -> Result<Var<'t>> {
        x.lstm(
            tape.param(store, self.w_ih),
            tape.param(store, self.w_hh),
            tape.param(store, self.b),
            reverse,
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BiLstmParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

impl BiLstmParams {
    pub fn new(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        BiLstmParams {
            fwd: LstmParams::new(store, &format!("{prefix}.fwd"), input, hidden, rng),
            bwd: LstmParams::new(store, &format!("{prefix}.bwd"), input, hidden, rng),
        }
    }

    pub fn output_width(&self) -> usize {
        self.fwd.hidden + self.bwd.hidden
    }
}

/// Bidirectional LSTM over the rows of `x` (`n x d`), zero initial state in
/// both directions. Output is `n x 2u`, forward half first.
pub fn bilstm<'t>(tape: &'t Tape, store: &ParamStore, params: &BiLstmParams, x: Var<'t>) -> Result<Var<'t>> {
    let fwd = params.fwd.run(tape, store, x, false)?;
    let bwd = params.bwd.run(tape, store, x, true)?;
    tape.concat_cols(&[fwd, bwd])
}

/// Valid convolution with window `window` over the rows of `x` (`n x d`):
/// row `t` of the output is `tanh([x_t, ..., x_{t+window-1}] W + b)`.
pub fn conv_window<'t>(x: Var<'t>, window: usize, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    Ok(x.unfold(window)?.matmul(weight)?.add_row_bias(bias)?.tanh())
}
