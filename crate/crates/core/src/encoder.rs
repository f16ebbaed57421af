//! Multi-scale contextual self-attentive sentence encoder.
//!
//! For each window size `i` in `1..=k`, word vectors are convolved (valid
//! padding) and run through a Bi-LSTM to give `H^i` (`n_i x 2u1`). A second,
//! attention-side Bi-LSTM over `tanh(H^i Ws1)` produces logits `M Ws2`, which
//! are softmax-normalized over positions into `A^i` (`n_i x r`). The scale's
//! embedding is `T^i = (A^i)^T H^i` (`r x 2u1`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    bilstm, conv_window, xavier_uniform, Axis, BiLstmParams, Mode, ParamId, ParamStore, Tape, Tensor, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CamseConfig {
    /// Number of scales; window sizes are `1..=scales`.
    pub scales: usize,
    /// Semantic subspaces `r`.
    pub subspaces: usize,
    /// Word-vector width `d`.
    pub embed_dim: usize,
    /// Context Bi-LSTM one-direction size `u1`.
    pub context_hidden: usize,
    /// Attention Bi-LSTM one-direction size `u2`; defaults to `u1`.
    pub attention_hidden: Option<usize>,
    /// Attention projection size `d_a`.
    pub attention_dim: usize,
    pub dropout: f64,
}

impl Default for CamseConfig {
    fn default() -> Self {
        CamseConfig {
            scales: 3,
            subspaces: 15,
            embed_dim: 200,
            context_hidden: 128,
            attention_hidden: None,
            attention_dim: 100,
            dropout: 0.2,
        }
    }
}

impl CamseConfig {
    pub fn attention_hidden(&self) -> usize {
        self.attention_hidden.unwrap_or(self.context_hidden)
    }

    /// Width `2u1` of each subspace embedding.
    pub fn embedding_width(&self) -> usize {
        2 * self.context_hidden
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("scales", self.scales),
            ("subspaces", self.subspaces),
            ("embed_dim", self.embed_dim),
            ("context_hidden", self.context_hidden),
            ("attention_hidden", self.attention_hidden()),
            ("attention_dim", self.attention_dim),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder.{name} must be at least 1")));
        }
        crate::numerics::check_dropout_rate(self.dropout)
    }
}

/// Parameters of one scale.
#[derive(Clone, Copy, Debug)]
pub struct ScaleParams {
    pub window: usize,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub context: BiLstmParams,
    pub ws1: ParamId,
    pub attention: BiLstmParams,
    pub ws2: ParamId,
}

#[derive(Clone, Debug)]
pub struct CamseEncoder {
    pub config: CamseConfig,
    pub scales: Vec<ScaleParams>,
}

/// Per-scale forward results recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ScaleOutput<'t> {
    /// `H^i`, `n_i x 2u1`.
    pub context: Var<'t>,
    /// `A^i`, `n_i x r`.
    pub attention: Var<'t>,
    /// `T^i`, `r x 2u1`.
    pub embedding: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct EncodedSentence<'t> {
    pub scales: Vec<ScaleOutput<'t>>,
}

impl EncodedSentence<'_> {
    /// Detached values: `T` as `k x r x 2u1` plus each `A^i`.
    pub fn to_tensor(&self) -> EmbeddingTensor {
        let (r, w) = {
            let t = self.scales[0].embedding.value();
            (t.rows(), t.cols())
        };
        let mut data = Vec::with_capacity(self.scales.len() * r * w);
        for s in &self.scales {
            data.extend_from_slice(s.embedding.value().data());
        }
        EmbeddingTensor {
            tensor: Tensor::new(vec![self.scales.len(), r, w], data).expect("consistent scale shapes"),
            attention: self.scales.iter().map(|s| (*s.attention.value()).clone()).collect(),
        }
    }
}

/// Sentence embedding tensor with the attention matrices that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTensor {
    pub tensor: Tensor,
    pub attention: Vec<Tensor>,
}

impl EmbeddingTensor {
    /// `T^i` for 0-based scale index `i` as an `r x 2u1` matrix.
    pub fn scale(&self, i: usize) -> Tensor {
        let s = self.tensor.shape();
        let (r, w) = (s[1], s[2]);
        Tensor::new(vec![r, w], self.tensor.data()[i * r * w..(i + 1) * r * w].to_vec()).expect("slice shape")
    }
}

impl CamseEncoder {
    pub fn new(config: CamseConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let u1 = config.context_hidden;
        let u2 = config.attention_hidden();
        let mut scales = Vec::with_capacity(config.scales);
        for window in 1..=config.scales {
            let p = format!("encoder.scale{window}");
            let conv_w = store.add(format!("{p}.conv.w"), xavier_uniform(rng, window * d, d));
            let conv_b = store.add(format!("{p}.conv.b"), Tensor::zeros(&[d]));
            let context = BiLstmParams::new(store, &format!("{p}.context"), d, u1, rng);
            let ws1 = store.add(format!("{p}.attn.ws1"), xavier_uniform(rng, 2 * u1, config.attention_dim));
            let attention = BiLstmParams::new(store, &format!("{p}.attn.bilstm"), config.attention_dim, u2, rng);
            let ws2 = store.add(format!("{p}.attn.ws2"), xavier_uniform(rng, 2 * u2, config.subspaces));
            scales.push(ScaleParams {
                window,
                conv_w,
                conv_b,
                context,
                ws1,
                attention,
                ws2,
            });
        }
        Ok(CamseEncoder { config, scales })
    }

    /// Rebuilds parameter handles by name from a store laid out by [`CamseEncoder::new`].
    pub fn bind(config: CamseConfig, store: &ParamStore) -> Result<Self> {
        let mut scratch = ParamStore::new();
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let template = CamseEncoder::new(config, &mut scratch, &mut rng)?;
        rebind_params(&scratch, store)?;
        let remap = |id: ParamId| store.id(&scratch.get(id).name).expect("checked by rebind");
        let lstm = |b: BiLstmParams| {
            let one = |l: crate::numerics::LstmParams| crate::numerics::LstmParams {
                w_ih: remap(l.w_ih),
                w_hh: remap(l.w_hh),
                b: remap(l.b),
                hidden: l.hidden,
            };
            BiLstmParams { fwd: one(b.fwd), bwd: one(b.bwd) }
        };
        let scales = template
            .scales
            .iter()
            .map(|s| ScaleParams {
                window: s.window,
                conv_w: remap(s.conv_w),
                conv_b: remap(s.conv_b),
                context: lstm(s.context),
                ws1: remap(s.ws1),
                attention: lstm(s.attention),
                ws2: remap(s.ws2),
            })
            .collect();
        Ok(CamseEncoder {
            config: template.config,
            scales,
        })
    }

    /// `H^i = BiLSTM_i(conv_i(E))` for every scale; dropout on `H^i` in train mode.
    pub fn multi_scale_context<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        words: Var<'t>,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Vec<Var<'t>>> {
        let n = words.value().rows();
        if n < self.config.scales {
            return Err(Error::SequenceTooShort {
                len: n,
                required: self.config.scales,
            });
        }
        self.scales
            .iter()
            .map(|s| {
                let conv = conv_window(words, s.window, tape.param(store, s.conv_w), tape.param(store, s.conv_b))?;
                let h = bilstm(tape, store, &s.context, conv)?;
                h.dropout(self.config.dropout, mode, rng)
            })
            .collect()
    }

    /// `A^i = softmax_columns(BiLSTM(tanh(H^i Ws1)) Ws2)`.
    pub fn contextual_attention<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        scale: usize,
        context: Var<'t>,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Var<'t>> {
        let s = &self.scales[scale];
        let m1 = context
            .matmul(tape.param(store, s.ws1))?
            .tanh()
            .dropout(self.config.dropout, mode, rng)?;
        let m2 = bilstm(tape, store, &s.attention, m1)?;
        Ok(m2.matmul(tape.param(store, s.ws2))?.softmax(Axis::Columns))
    }

    /// Runs every scale over `words` (`n x d`, already looked up).
    pub fn encode<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        words: Var<'t>,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<EncodedSentence<'t>> {
        let contexts = self.multi_scale_context(tape, store, words, mode, rng)?;
        let mut scales = Vec::with_capacity(contexts.len());
        for (i, context) in contexts.into_iter().enumerate() {
            let attention = self.contextual_attention(tape, store, i, context, mode, rng)?;
            let embedding = embed_tensor(context, attention)?;
            scales.push(ScaleOutput {
                context,
                attention,
                embedding,
            });
        }
        Ok(EncodedSentence { scales })
    }
}

/// `T^i = (A^i)^T H^i`.
pub fn embed_tensor<'t>(context: Var<'t>, attention: Var<'t>) -> Result<Var<'t>> {
    attention.transpose().matmul(context)
}

/// Checks that every parameter in `template` exists in `store` with the same shape.
pub(crate) fn rebind_params(template: &ParamStore, store: &ParamStore) -> Result<()> {
    for (_, p) in template.iter() {
        let id = store
            .id(&p.name)
            .ok_or_else(|| Error::Corrupt(format!("missing parameter {}", p.name)))?;
        let found = store.value(id).shape();
        if found != p.value().shape() {
            return Err(Error::Corrupt(format!(
                "parameter {} has shape {:?}, expected {:?}",
                p.name,
                found,
                p.value().shape()
            )));
        }
    }
    Ok(())
}
