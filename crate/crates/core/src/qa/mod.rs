//! Multiple-choice answering over per-candidate evidence.

mod dataset;
mod model;
mod train;

pub use dataset::{
    dataset_to_string, parse_dataset, read_dataset, tokenize_records, write_dataset, DatasetHeader, QaInstance,
    QaRecord, DATASET_FORMAT, DATASET_VERSION,
};
pub use model::{CamseModel, CandidateScore, Limits, ModelConfig, EMBEDDINGS_PARAM};
pub use train::{train, EpochMetrics, TrainConfig, TrainReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::text::{EmbeddingTable, TokenSequence};

/// Index of the highest score; ties go to the lowest index.
pub fn predict(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// `-log softmax(scores)[gold]` on the tape.
pub fn loss<'t>(tape: &'t Tape, scores: &[Var<'t>], gold: usize) -> Result<Var<'t>> {
    tape.stack(scores).cross_entropy(gold)
}

/// Value-only version of [`loss`].
pub fn loss_value(scores: &[f64], gold: usize) -> Result<f64> {
    if gold >= scores.len() {
        return Err(Error::Invalid(format!(
            "gold index {gold} out of range for {} candidates",
            scores.len()
        )));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    Ok(-(scores[gold] - max - z.ln()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstancePrediction {
    pub id: String,
    pub predicted: usize,
    pub gold: usize,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub predictions: Vec<InstancePrediction>,
}

impl Evaluation {
    pub fn from_predictions(predictions: Vec<InstancePrediction>) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::Invalid("cannot evaluate on an empty set".into()));
        }
        let correct = predictions.iter().filter(|p| p.predicted == p.gold).count();
        let total = predictions.len();
        Ok(Evaluation {
            accuracy: correct as f64 / total as f64,
            correct,
            total,
            predictions,
        })
    }
}

pub fn predict_instance(model: &CamseModel, inst: &QaInstance) -> Result<InstancePrediction> {
    let gold = inst.gold()?;
    let scores = model.score_instance(inst)?;
    Ok(InstancePrediction {
        id: inst.id.clone(),
        predicted: predict(&scores),
        gold,
        scores,
    })
}

/// Fraction of instances whose prediction matches the gold answer.
pub fn evaluate(model: &CamseModel, data: &[QaInstance]) -> Result<Evaluation> {
    let predictions = data
        .iter()
        .map(|inst| predict_instance(model, inst))
        .collect::<Result<Vec<_>>>()?;
    Evaluation::from_predictions(predictions)
}

/// Mean of a sequence's word vectors.
pub fn mean_pool(table: &EmbeddingTable, seq: &TokenSequence) -> Result<Vec<f64>> {
    let words = table.lookup(seq)?;
    let mut mean = vec![0.0; table.dim()];
    for r in 0..words.rows() {
        for (m, v) in mean.iter_mut().zip(words.row(r)) {
            *m += v;
        }
    }
    let n = words.rows().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Cosine with a zero-vector guard.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na * nb < crate::numerics::COSINE_EPS {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Word-level control: candidates scored by summed cosine between
/// mean-pooled statement and document vectors.
pub fn baseline_scores(inst: &QaInstance, table: &EmbeddingTable, limits: &Limits) -> Result<Vec<f64>> {
    inst.choices
        .iter()
        .zip(&inst.evidence)
        .map(|(choice, docs)| {
            let statement = mean_pool(table, &inst.question.concat(choice, None))?;
            docs.iter().take(limits.evidence_cap).try_fold(0.0, |acc, d| {
                Ok(acc + cosine(&statement, &mean_pool(table, d)?))
            })
        })
        .collect()
}

pub fn baseline_mean_cosine(inst: &QaInstance, table: &EmbeddingTable, limits: &Limits) -> Result<usize> {
    Ok(predict(&baseline_scores(inst, table, limits)?))
}

pub fn baseline_accuracy(data: &[QaInstance], table: &EmbeddingTable, limits: &Limits) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty set".into()));
    }
    let mut correct = 0;
    for inst in data {
        if baseline_mean_cosine(inst, table, limits)? == inst.gold()? {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
