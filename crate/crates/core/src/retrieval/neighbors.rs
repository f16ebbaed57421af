use super::index::{rank_scores, ScoredDoc};
use crate::numerics::COSINE_EPS;
use crate::text::TokenSequence;

/// A previously solved question with its class and representation.
#[derive(Clone, Debug)]
pub struct BankEntry {
    pub tokens: TokenSequence,
    pub class: usize,
    pub repr: Vec<f64>,
}

/// Cosine similarity; 0 when either vector has (near-)zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na * nb < COSINE_EPS {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// For each candidate class, the `per_class_k` bank entries of that class
/// most cosine-similar to `query`. `ScoredDoc::doc` indexes into `bank`.
pub fn neighbor_evidence(
    query: &[f64],
    choice_classes: &[usize],
    bank: &[BankEntry],
    per_class_k: usize,
) -> Vec<Vec<ScoredDoc>> {
    choice_classes
        .iter()
        .map(|&class| {
            let scored: Vec<(usize, f64)> = bank
                .iter()
                .enumerate()
                .filter(|(_, e)| e.class == class)
                .map(|(i, e)| (i, cosine(query, &e.repr)))
                .collect();
            if scored.is_empty() {
                log::warn!("no bank entries for class {class}; evidence list is empty");
            }
            let mut ranked = rank_scores(scored);
            ranked.truncate(per_class_k);
            ranked
        })
        .collect()
}
