//! Evidence retrieval: BM25 over a document corpus, and nearest neighbors
//! over learned question representations.

mod classifier;
mod index;
mod neighbors;

pub use classifier::{train_repr_classifier, ClassifierConfig, ReprClassifier};
pub use index::{bm25_idf, bm25_term, rank_scores, read_corpus, Bm25Params, InvertedIndex, Posting, ScoredDoc};
pub use neighbors::{cosine, neighbor_evidence, BankEntry};

/// Default number of evidence documents kept per candidate.
pub const DEFAULT_EVIDENCE_K: usize = 10;
