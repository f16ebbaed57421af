//! Tokens, vocabulary, word-vector tables, truncation and near-duplicate
//! filtering.

mod embedding;
mod levenshtein;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use embedding::{load_embeddings, parse_embeddings, random_embeddings, write_embeddings, EmbeddingTable};
pub use levenshtein::{dedup_train, levenshtein, levenshtein_ratio, DEFAULT_DEDUP_THRESHOLD};

use crate::error::{Error, Result};

/// Id reserved for out-of-vocabulary tokens.
pub const OOV: usize = 0;

/// Token-to-id map. Id 0 is the OOV sentinel and is never assigned to a
/// real token.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Vocabulary {
            tokens: vec![String::new()],
            index: HashMap::new(),
        }
    }

    /// Builds a vocabulary from distinct tokens, assigned ids `1..`.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::new();
        for t in tokens {
            let t = t.into();
            if vocab.index.contains_key(&t) {
                return Err(Error::Invalid(format!("duplicate vocabulary token {t:?}")));
            }
            vocab.push(t);
        }
        Ok(vocab)
    }

    fn push(&mut self, token: String) -> usize {
        let id = self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    /// Adds `token` if absent and returns its id.
    pub fn insert(&mut self, token: &str) -> usize {
        match self.index.get(token) {
            Some(&id) => id,
            None => self.push(token.to_string()),
        }
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(OOV)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Token for `id`, or `None` for the OOV sentinel and unknown ids.
    pub fn token(&self, id: usize) -> Option<&str> {
        (id != OOV).then(|| self.tokens.get(id).map(String::as_str)).flatten()
    }

    /// Number of ids including the OOV sentinel.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    /// Real tokens in id order (excluding the sentinel).
    pub fn tokens(&self) -> &[String] {
        &self.tokens[1..]
    }

    /// Rebuilds the lookup map after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }
}

/// Token ids together with the original token strings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub raw: Vec<String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Concatenation `self ⊕ other`, optionally with a separator token between.
    pub fn concat(&self, other: &TokenSequence, separator: Option<(usize, &str)>) -> TokenSequence {
        let mut ids = self.ids.clone();
        let mut raw = self.raw.clone();
        if let Some((id, tok)) = separator {
            ids.push(id);
            raw.push(tok.to_string());
        }
        ids.extend_from_slice(&other.ids);
        raw.extend(other.raw.iter().cloned());
        TokenSequence { ids, raw }
    }

    pub fn text(&self) -> String {
        self.raw.join(" ")
    }
}

/// Splits on whitespace and maps tokens through `vocab` (unknown → OOV).
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<TokenSequence> {
    let raw: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    if raw.is_empty() {
        return Err(Error::EmptySequence(format!("no tokens in {text:?}")));
    }
    let ids = raw.iter().map(|t| vocab.id(t)).collect();
    Ok(TokenSequence { ids, raw })
}

/// Keeps the first `max_len` tokens. `min_len` is the largest convolution
/// window, below which truncation would make encoding infeasible.
pub fn truncate(seq: &TokenSequence, max_len: usize, min_len: usize) -> Result<TokenSequence> {
    if max_len < min_len {
        return Err(Error::Config(format!(
            "truncation length {max_len} is below the largest convolution window {min_len}"
        )));
    }
    let keep = seq.len().min(max_len);
    Ok(TokenSequence {
        ids: seq.ids[..keep].to_vec(),
        raw: seq.raw[..keep].to_vec(),
    })
}
