use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CAMSEIDX";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

/// Term → postings (sorted by doc id), plus per-document lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct InvertedIndex {
    postings: BTreeMap<String, Vec<Posting>>,
    doc_lengths: Vec<u32>,
    avg_len: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredDoc {
    pub doc: usize,
    pub score: f64,
    /// 0-based position in the result list.
    pub rank: usize,
}

/// Non-negative BM25 idf: `ln((N - df + 0.5) / (df + 0.5) + 1)`.
pub fn bm25_idf(num_docs: usize, df: usize) -> f64 {
    let (n, df) = (num_docs as f64, df as f64);
    ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
}

/// One term's contribution for a document.
pub fn bm25_term(idf: f64, tf: f64, doc_len: f64, avg_len: f64, params: Bm25Params) -> f64 {
    let Bm25Params { k1, b } = params;
    idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * doc_len / avg_len))
}

/// Sorts by descending score, ties by ascending doc id, and assigns ranks.
pub fn rank_scores(mut scored: Vec<(usize, f64)>) -> Vec<ScoredDoc> {
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    scored
        .into_iter()
        .enumerate()
        .map(|(rank, (doc, score))| ScoredDoc { doc, score, rank })
        .collect()
}

impl InvertedIndex {
    pub fn build<D, S>(corpus: &[D]) -> Result<Self>
    where
        D: AsRef<[S]>,
        S: AsRef<str>,
    {
        if corpus.is_empty() {
            return Err(Error::Invalid("cannot index an empty corpus".into()));
        }
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(corpus.len());
        for (doc, tokens) in corpus.iter().enumerate() {
            let tokens = tokens.as_ref();
            if tokens.is_empty() {
                return Err(Error::Invalid(format!("document {doc} has no tokens")));
            }
            let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
            for t in tokens {
                *counts.entry(t.as_ref()).or_default() += 1;
            }
            for (term, tf) in counts {
                postings.entry(term.to_string()).or_default().push(Posting {
                    doc: doc as u32,
                    tf,
                });
            }
            doc_lengths.push(tokens.len() as u32);
        }
        let avg_len = doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / doc_lengths.len() as f64;
        Ok(InvertedIndex {
            postings,
            doc_lengths,
            avg_len,
        })
    }

    pub fn num_docs(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn doc_len(&self, doc: usize) -> usize {
        self.doc_lengths[doc] as usize
    }

    pub fn num_terms(&self) -> usize {
        self.postings.len()
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings(term).len()
    }

    pub fn tf(&self, term: &str, doc: usize) -> u32 {
        let p = self.postings(term);
        p.binary_search_by_key(&(doc as u32), |x| x.doc)
            .map_or(0, |i| p[i].tf)
    }

    /// BM25 over every query token occurrence; documents scoring 0 are omitted.
    pub fn bm25<S: AsRef<str>>(&self, query: &[S], params: Bm25Params) -> Vec<ScoredDoc> {
        let mut scores = vec![0.0; self.num_docs()];
        let mut touched = vec![false; self.num_docs()];
        for term in query {
            let postings = self.postings(term.as_ref());
            if postings.is_empty() {
                continue;
            }
            let idf = bm25_idf(self.num_docs(), postings.len());
            for p in postings {
                let d = p.doc as usize;
                scores[d] += bm25_term(idf, p.tf as f64, self.doc_lengths[d] as f64, self.avg_len, params);
                touched[d] = true;
            }
        }
        rank_scores(
            scores
                .into_iter()
                .enumerate()
                .filter(|&(d, s)| touched[d] && s > 0.0)
                .collect(),
        )
    }

    /// The `k` best documents for `statement`; fewer if the corpus runs out.
    pub fn top_k<S: AsRef<str>>(&self, statement: &[S], k: usize, params: Bm25Params) -> Result<Vec<ScoredDoc>> {
        if k == 0 {
            return Err(Error::Config("evidence count k must be at least 1".into()));
        }
        let mut ranked = self.bm25(statement, params);
        ranked.truncate(k);
        Ok(ranked)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.doc_lengths.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.avg_len.to_le_bytes());
        for &l in &self.doc_lengths {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out.extend_from_slice(&(self.postings.len() as u32).to_le_bytes());
        for (term, list) in &self.postings {
            out.extend_from_slice(&(term.len() as u32).to_le_bytes());
            out.extend_from_slice(term.as_bytes());
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for p in list {
                out.extend_from_slice(&p.doc.to_le_bytes());
                out.extend_from_slice(&p.tf.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Corrupt("not an index file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Corrupt(format!("unsupported index version {version}")));
        }
        let num_docs = r.u32()? as usize;
        let avg_len = r.f64()?;
        let doc_lengths = (0..num_docs).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let num_terms = r.u32()? as usize;
        let mut postings = BTreeMap::new();
        for _ in 0..num_terms {
            let len = r.u32()? as usize;
            let term = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Corrupt("term is not UTF-8".into()))?
                .to_string();
            let count = r.u32()? as usize;
            let mut list = Vec::with_capacity(count);
            for _ in 0..count {
                let p = Posting { doc: r.u32()?, tf: r.u32()? };
                if p.doc as usize >= num_docs || list.last().is_some_and(|q: &Posting| q.doc >= p.doc) {
                    return Err(Error::Corrupt(format!("bad posting list for term {term:?}")));
                }
                list.push(p);
            }
            postings.insert(term, list);
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt("trailing bytes after index".into()));
        }
        Ok(InvertedIndex {
            postings,
            doc_lengths,
            avg_len,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt("index file is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads a corpus file: one pre-tokenized document per line.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Vec<String>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}
