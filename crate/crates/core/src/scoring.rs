//! Pair scoring between two encoded sentences.
//!
//! Per scale, aligned subspaces are compared by cosine (matching scores on
//! the diagonal) and every ordered pair of distinct subspaces gets its own
//! sigmoid unit (association scores off the diagonal). A gate computed from
//! the statement alone weights each entry, and the diagonal and off-diagonal
//! parts are summed separately. A linear layer over the `2k` sums gives the
//! scalar pair score.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{CamseConfig, EncodedSentence};
use crate::error::{Error, Result};
use crate::numerics::{xavier_uniform, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    /// Inner width of the gate network.
    pub gate_hidden: usize,
    /// Per-pair bias in the association units.
    pub sas_bias: bool,
    /// When false the association pathway is dropped (matching-only ablation).
    pub use_sas: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            gate_hidden: 128,
            sas_bias: true,
            use_sas: true,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gate_hidden == 0 {
            return Err(Error::Config("scoring.gate_hidden must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ScaleScoring {
    /// `r(r-1) x 4u1`; row `idx` holds `w_uv` (see [`crate::numerics::off_diagonal_pairs`]).
    pub sas_w: ParamId,
    pub sas_b: Option<ParamId>,
    pub gate_w1: ParamId,
    pub gate_w2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Scorer {
    pub config: ScoringConfig,
    pub subspaces: usize,
    pub scales: Vec<ScaleScoring>,
    /// `1 x 2k`.
    pub w_s: ParamId,
    /// `1 x 1`.
    pub b_s: ParamId,
}

/// One scale's intermediate values on the tape.
#[derive(Clone, Copy, Debug)]
pub struct ScaleScore<'t> {
    /// `r x 1` cosines.
    pub sms: Var<'t>,
    /// `r x r` association scores, zero diagonal.
    pub sas: Var<'t>,
    pub gate: Var<'t>,
    pub o_sms: Var<'t>,
    pub o_sas: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct PairScore<'t> {
    pub scales: Vec<ScaleScore<'t>>,
    /// Scalar score `S`.
    pub score: Var<'t>,
}

/// Detached values of one scored pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorePack {
    pub scales: Vec<ScalePack>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalePack {
    pub sms: Vec<f64>,
    /// Row-major `r x r`.
    pub sas: Vec<f64>,
    pub gate: Vec<f64>,
    pub o_sms: f64,
    pub o_sas: f64,
}

impl ScalePack {
    /// Matching scores on the diagonal, association scores elsewhere.
    pub fn combined(&self) -> Vec<f64> {
        let r = self.sms.len();
        let mut out = self.sas.clone();
        for u in 0..r {
            out[u * r + u] = self.sms[u];
        }
        out
    }
}

impl PairScore<'_> {
    pub fn pack(&self) -> ScorePack {
        ScorePack {
            scales: self
                .scales
                .iter()
                .map(|s| ScalePack {
                    sms: s.sms.value().data().to_vec(),
                    sas: s.sas.value().data().to_vec(),
                    gate: s.gate.value().data().to_vec(),
                    o_sms: s.o_sms.item(),
                    o_sas: s.o_sas.item(),
                })
                .collect(),
            score: self.score.item(),
        }
    }
}

impl Scorer {
    pub fn new(config: ScoringConfig, encoder: &CamseConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let r = encoder.subspaces;
        let m = encoder.embedding_width();
        let pairs = r * (r - 1);
        let mut scales = Vec::with_capacity(encoder.scales);
        for i in 1..=encoder.scales {
            let p = format!("scoring.scale{i}");
            let sas_w = store.add(format!("{p}.sas.w"), xavier_uniform(rng, pairs, 2 * m));
            let sas_b = config
                .sas_bias
                .then(|| store.add(format!("{p}.sas.b"), Tensor::zeros(&[pairs])));
            let gate_w1 = store.add(format!("{p}.gate.w1"), xavier_uniform(rng, config.gate_hidden, r * m));
            let gate_w2 = store.add(format!("{p}.gate.w2"), xavier_uniform(rng, r * r, config.gate_hidden));
            scales.push(ScaleScoring {
                sas_w,
                sas_b,
                gate_w1,
                gate_w2,
            });
        }
        let w_s = store.add("scoring.w_s", xavier_uniform(rng, 1, 2 * encoder.scales));
        let b_s = store.add("scoring.b_s", Tensor::zeros(&[1, 1]));
        Ok(Scorer {
            config,
            subspaces: r,
            scales,
            w_s,
            b_s,
        })
    }

    /// Rebuilds handles by name from a store laid out by [`Scorer::new`].
    pub fn bind(config: ScoringConfig, encoder: &CamseConfig, store: &ParamStore) -> Result<Self> {
        let mut scratch = ParamStore::new();
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let t = Scorer::new(config, encoder, &mut scratch, &mut rng)?;
        crate::encoder::rebind_params(&scratch, store)?;
        let remap = |id: ParamId| store.id(&scratch.get(id).name).expect("checked by rebind");
        Ok(Scorer {
            scales: t
                .scales
                .iter()
                .map(|s| ScaleScoring {
                    sas_w: remap(s.sas_w),
                    sas_b: s.sas_b.map(remap),
                    gate_w1: remap(s.gate_w1),
                    gate_w2: remap(s.gate_w2),
                })
                .collect(),
            w_s: remap(t.w_s),
            b_s: remap(t.b_s),
            config: t.config,
            subspaces: t.subspaces,
        })
    }

    /// Scores a statement against a document.
    pub fn score_pair<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        statement: &EncodedSentence<'t>,
        document: &EncodedSentence<'t>,
    ) -> Result<PairScore<'t>> {
        if statement.scales.len() != self.scales.len() || document.scales.len() != self.scales.len() {
            return Err(Error::Config(format!(
                "scorer expects {} scales, got {} and {}",
                self.scales.len(),
                statement.scales.len(),
                document.scales.len()
            )));
        }
        let r = self.subspaces;
        let mut scales = Vec::with_capacity(self.scales.len());
        for (i, params) in self.scales.iter().enumerate() {
            let (t1, t2) = (statement.scales[i].embedding, document.scales[i].embedding);
            if t1.shape() != t2.shape() || t1.shape()[0] != r {
                return Err(Error::Dimension {
                    op: "score_pair",
                    lhs: t1.shape(),
                    rhs: t2.shape(),
                });
            }
            let sms = sms(t1, t2)?;
            let g = gate(tape, store, params, t1)?;
            let (sas, o_sms, o_sas) = if self.config.use_sas {
                let sas = sas(tape, store, params, t1, t2)?;
                let (o_sms, o_sas) = aggregate_scale(sms, sas, g)?;
                (sas, o_sms, o_sas)
            } else {
                let sas = tape.constant(Tensor::zeros(&[r, r]));
                let (o_sms, _) = aggregate_scale(sms, sas, g)?;
                (sas, o_sms, tape.constant(Tensor::scalar(0.0)))
            };
            scales.push(ScaleScore {
                sms,
                sas,
                gate: g,
                o_sms,
                o_sas,
            });
        }
        let features: Vec<Var<'t>> = scales
            .iter()
            .map(|s| s.o_sms)
            .chain(scales.iter().map(|s| s.o_sas))
            .collect();
        let score = tape
            .param(store, self.w_s)
            .matmul(tape.stack(&features))?
            .add(tape.param(store, self.b_s))?
            .reshape(&[])?;
        Ok(PairScore { scales, score })
    }
}

/// Aligned-subspace cosines, `r x 1`.
pub fn sms<'t>(t1: Var<'t>, t2: Var<'t>) -> Result<Var<'t>> {
    t1.row_cosine(t2)
}

/// Cross-subspace association scores, `r x r` with a zero diagonal.
pub fn sas<'t>(tape: &'t Tape, store: &ParamStore, params: &ScaleScoring, t1: Var<'t>, t2: Var<'t>) -> Result<Var<'t>> {
    let r = t1.shape()[0];
    let b = params.sas_b.map(|b| tape.param(store, b));
    let logits = t1.pair_logits(t2, tape.param(store, params.sas_w), b)?;
    logits.sigmoid().mul(tape.constant(off_diagonal_mask(r)))
}

/// Statement-only gate `sigmoid(W2 tanh(W1 vec(T1)))` reshaped to `r x r`.
pub fn gate<'t>(tape: &'t Tape, store: &ParamStore, params: &ScaleScoring, t1: Var<'t>) -> Result<Var<'t>> {
    let shape = t1.shape();
    let r = shape[0];
    let flat = t1.reshape(&[shape[0] * shape[1], 1])?;
    let hidden = tape.param(store, params.gate_w1).matmul(flat)?.tanh();
    tape.param(store, params.gate_w2)
        .matmul(hidden)?
        .sigmoid()
        .reshape(&[r, r])
}

/// `(sum_u diag_u G_uu, sum_{u != v} S_sas[u,v] G_uv)` via diagonal and
/// off-diagonal masks over the combined matrix.
pub fn aggregate_scale<'t>(diag: Var<'t>, sas: Var<'t>, gate: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let tape = diag.tape();
    let r = diag.value().len();
    let combined = diag.diag().add(sas)?.mul(gate)?;
    let o_sms = combined.mul(tape.constant(Tensor::eye(r)))?.sum();
    let o_sas = combined.mul(tape.constant(off_diagonal_mask(r)))?.sum();
    Ok((o_sms, o_sas))
}

pub fn off_diagonal_mask(r: usize) -> Tensor {
    let mut m = Tensor::ones(&[r, r]);
    for u in 0..r {
        m.data_mut()[u * r + u] = 0.0;
    }
    m
}
