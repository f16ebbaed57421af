//! Deterministic synthetic corpora.
//!
//! Entity corpus: diseases are multi-token entities built as distinct
//! orderings of a shared token family, so distractor evidence carries the
//! same bag of entity tokens as the gold evidence and only token order tells
//! them apart. Association corpus: questions name causes, evidence names
//! symptoms, and the two never share a token.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qa::QaRecord;
use crate::text::{random_embeddings, EmbeddingTable, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Total vocabulary size, excluding the OOV slot.
    pub vocab_size: usize,
    pub num_diseases: usize,
    /// Tokens per entity.
    pub entity_len: usize,
    /// Cause and symptom tokens per disease (association corpus).
    pub symptoms_per_disease: usize,
    /// Noise tokens per question.
    pub question_len: usize,
    /// Noise tokens per evidence document.
    pub doc_len: usize,
    pub num_choices: usize,
    pub docs_per_choice: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub embed_dim: usize,
    /// Set from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 200,
            num_diseases: 24,
            entity_len: 3,
            symptoms_per_disease: 3,
            question_len: 3,
            doc_len: 3,
            num_choices: 4,
            docs_per_choice: 3,
            train_size: 500,
            test_size: 200,
            embed_dim: 32,
            seed: 13,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    Entity,
    Association,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub train: Vec<QaRecord>,
    pub test: Vec<QaRecord>,
    pub vocab: Vocabulary,
    pub table: EmbeddingTable,
}

/// Disease inventory shared by both corpora.
struct Diseases {
    names: Vec<String>,
    /// Entity tokens in order (entity corpus) or cause tokens (association).
    question_side: Vec<Vec<String>>,
    /// Identical to `question_side` for entities; symptom tokens for associations.
    doc_side: Vec<Vec<String>>,
    /// Diseases that share an entity family, used first as distractors.
    family: Vec<usize>,
    question_noise: Vec<String>,
    doc_noise: Vec<String>,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.entity_len < 2 {
            return bad("entity_len must be at least 2");
        }
        if self.num_choices < 2 {
            return bad("num_choices must be at least 2");
        }
        if self.num_diseases < self.num_choices {
            return bad("num_diseases must be at least num_choices");
        }
        if self.symptoms_per_disease == 0 || self.docs_per_choice == 0 || self.embed_dim == 0 {
            return bad("symptoms_per_disease, docs_per_choice and embed_dim must be at least 1");
        }
        if self.train_size == 0 {
            return bad("train_size must be at least 1");
        }
        Ok(())
    }

    fn orderings_per_family(&self) -> usize {
        let perms = (1..=self.entity_len).product::<usize>();
        perms.min(self.num_choices)
    }

    fn noise_budget(&self, kind: CorpusKind) -> Result<usize> {
        let content = match kind {
            CorpusKind::Entity => self.num_diseases.div_ceil(self.orderings_per_family()) * self.entity_len,
            CorpusKind::Association => 2 * self.num_diseases * self.symptoms_per_disease,
        };
        let used = content + self.num_diseases;
        let noise = self.vocab_size.saturating_sub(used);
        if noise < 4 {
            return Err(Error::Config(format!(
                "synth: vocab_size {} leaves {noise} noise tokens after {used} entity and name tokens; need at least 4",
                self.vocab_size
            )));
        }
        Ok(noise)
    }
}

fn build_diseases(cfg: &SynthConfig, kind: CorpusKind, rng: &mut ChaCha8Rng) -> Result<Diseases> {
    let noise = cfg.noise_budget(kind)?;
    let names = (0..cfg.num_diseases).map(|i| format!("dis{i:03}")).collect();
    let mut question_side = Vec::with_capacity(cfg.num_diseases);
    let mut doc_side = Vec::with_capacity(cfg.num_diseases);
    let mut family = Vec::with_capacity(cfg.num_diseases);
    match kind {
        CorpusKind::Entity => {
            let per = cfg.orderings_per_family();
            let families = cfg.num_diseases.div_ceil(per);
            let mut d = 0;
            for f in 0..families {
                let tokens: Vec<String> = (0..cfg.entity_len).map(|j| format!("ent{:03}", f * cfg.entity_len + j)).collect();
                for perm in distinct_orderings(&tokens, per, rng) {
                    if d == cfg.num_diseases {
                        break;
                    }
                    question_side.push(perm.clone());
                    doc_side.push(perm);
                    family.push(f);
                    d += 1;
                }
            }
        }
        CorpusKind::Association => {
            let k = cfg.symptoms_per_disease;
            for d in 0..cfg.num_diseases {
                question_side.push((0..k).map(|j| format!("cause{:03}", d * k + j)).collect());
                doc_side.push((0..k).map(|j| format!("symp{:03}", d * k + j)).collect());
                family.push(d);
            }
        }
    }
    let q = noise / 2;
    Ok(Diseases {
        names,
        question_side,
        doc_side,
        family,
        question_noise: (0..q).map(|i| format!("qn{i:03}")).collect(),
        doc_noise: (0..noise - q).map(|i| format!("dn{i:03}")).collect(),
    })
}

/// `count` distinct orderings of `tokens`, the identity first.
fn distinct_orderings(tokens: &[String], count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<String>> {
    let mut out = vec![tokens.to_vec()];
    while out.len() < count {
        let mut p = tokens.to_vec();
        p.shuffle(rng);
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

fn noise<'a>(pool: &'a [String], n: usize, rng: &mut ChaCha8Rng) -> Vec<&'a str> {
    (0..n).map(|_| pool[rng.gen_range(0..pool.len())].as_str()).collect()
}

/// Inserts `span` as a contiguous block at a random position of `words`.
fn with_span<'a>(mut words: Vec<&'a str>, span: &'a [String], rng: &mut ChaCha8Rng) -> String {
    let at = rng.gen_range(0..=words.len());
    words.splice(at..at, span.iter().map(String::as_str));
    words.join(" ")
}

/// Scatters `tokens` individually among `words`.
fn scattered<'a>(mut words: Vec<&'a str>, tokens: &'a [String], rng: &mut ChaCha8Rng) -> String {
    for t in tokens {
        let at = rng.gen_range(0..=words.len());
        words.insert(at, t);
    }
    words.join(" ")
}

fn distractors(ds: &Diseases, gold: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut same: Vec<usize> = (0..ds.names.len()).filter(|&d| d != gold && ds.family[d] == ds.family[gold]).collect();
    let mut other: Vec<usize> = (0..ds.names.len()).filter(|&d| ds.family[d] != ds.family[gold]).collect();
    same.shuffle(rng);
    other.shuffle(rng);
    same.into_iter().chain(other).take(n).collect()
}

fn instance(cfg: &SynthConfig, kind: CorpusKind, ds: &Diseases, id: String, rng: &mut ChaCha8Rng) -> QaRecord {
    let gold = rng.gen_range(0..ds.names.len());
    let answer = rng.gen_range(0..cfg.num_choices);
    let mut wrong = distractors(ds, gold, cfg.num_choices - 1, rng).into_iter();
    let diseases: Vec<usize> = (0..cfg.num_choices)
        .map(|c| if c == answer { gold } else { wrong.next().expect("enough diseases") })
        .collect();
    let q_noise = noise(&ds.question_noise, cfg.question_len, rng);
    let question = match kind {
        CorpusKind::Entity => with_span(q_noise, &ds.question_side[gold], rng),
        CorpusKind::Association => scattered(q_noise, &ds.question_side[gold], rng),
    };
    let evidence = diseases
        .iter()
        .map(|&d| {
            (0..cfg.docs_per_choice)
                .map(|_| {
                    let words = noise(&ds.doc_noise, cfg.doc_len, rng);
                    match kind {
                        CorpusKind::Entity => with_span(words, &ds.doc_side[d], rng),
                        CorpusKind::Association => scattered(words, &ds.doc_side[d], rng),
                    }
                })
                .collect()
        })
        .collect();
    QaRecord {
        id,
        question,
        choices: diseases.iter().map(|&d| ds.names[d].clone()).collect(),
        evidence,
        answer: Some(answer),
    }
}

fn generate(cfg: &SynthConfig, kind: CorpusKind) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ds = build_diseases(cfg, kind, &mut rng)?;
    let tag = match kind {
        CorpusKind::Entity => "ent",
        CorpusKind::Association => "assoc",
    };
    let train = (0..cfg.train_size)
        .map(|i| instance(cfg, kind, &ds, format!("{tag}-train-{i:05}"), &mut rng))
        .collect();
    let test = (0..cfg.test_size)
        .map(|i| instance(cfg, kind, &ds, format!("{tag}-test-{i:05}"), &mut rng))
        .collect();
    let mut tokens: Vec<&str> = ds.names.iter().map(String::as_str).collect();
    let mut content: Vec<&str> = ds
        .question_side
        .iter()
        .chain(&ds.doc_side)
        .flatten()
        .map(String::as_str)
        .collect();
    content.sort_unstable();
    content.dedup();
    tokens.extend(content);
    tokens.extend(ds.question_noise.iter().chain(&ds.doc_noise).map(String::as_str));
    let vocab = Vocabulary::from_tokens(tokens)?;
    let table = random_embeddings(&vocab, cfg.embed_dim, cfg.seed.wrapping_add(1));
    Ok(SynthCorpus {
        train,
        test,
        vocab,
        table,
    })
}

pub fn gen_entity_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    generate(cfg, CorpusKind::Entity)
}

pub fn gen_association_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    generate(cfg, CorpusKind::Association)
}

pub fn gen_corpus(kind: CorpusKind, cfg: &SynthConfig) -> Result<SynthCorpus> {
    generate(cfg, kind)
}
