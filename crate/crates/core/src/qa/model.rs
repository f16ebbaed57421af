use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{CamseConfig, CamseEncoder, EncodedSentence};
use crate::error::{Error, Result};
use crate::numerics::{Mode, ParamId, ParamStore, Tape, Var};
use crate::scoring::{PairScore, Scorer, ScoringConfig};
use crate::text::{truncate, EmbeddingTable, TokenSequence, Vocabulary};

use super::QaInstance;

pub const EMBEDDINGS_PARAM: &str = "embeddings";

/// Truncation and evidence limits applied to every instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Limits {
    pub max_statement_len: usize,
    pub max_document_len: usize,
    /// Evidence documents scored per candidate.
    pub evidence_cap: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_statement_len: 100,
            max_document_len: 100,
            evidence_cap: 10,
        }
    }
}

impl Limits {
    pub fn validate(&self, scales: usize) -> Result<()> {
        if self.evidence_cap == 0 {
            return Err(Error::Config("limits.evidence_cap must be at least 1".into()));
        }
        for (name, v) in [
            ("max_statement_len", self.max_statement_len),
            ("max_document_len", self.max_document_len),
        ] {
            if v < scales {
                return Err(Error::Config(format!(
                    "limits.{name} = {v} is below the largest convolution window {scales}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: CamseConfig,
    pub scoring: ScoringConfig,
    pub limits: Limits,
    /// Train the word vectors along with the network.
    pub fine_tune_embeddings: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.scoring.validate()?;
        self.limits.validate(self.encoder.scales)
    }
}

#[derive(Clone, Debug)]
pub struct CamseModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub embeddings: ParamId,
    pub encoder: CamseEncoder,
    pub scorer: Scorer,
}

/// Reliability of one candidate: the sum of its evidence pair scores.
#[derive(Clone, Debug)]
pub struct CandidateScore<'t> {
    pub score: Var<'t>,
    pub pairs: Vec<PairScore<'t>>,
    /// True when the candidate had no evidence and scored 0.
    pub no_evidence: bool,
}

impl CamseModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary, table: &EmbeddingTable, seed: u64) -> Result<Self> {
        config.validate()?;
        check_table(&config, &vocab, table)?;
        let mut store = ParamStore::new();
        let matrix = table.matrix().clone();
        let embeddings = if config.fine_tune_embeddings {
            store.add(EMBEDDINGS_PARAM, matrix)
        } else {
            store.add_frozen(EMBEDDINGS_PARAM, matrix)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = CamseEncoder::new(config.encoder.clone(), &mut store, &mut rng)?;
        let scorer = Scorer::new(config.scoring.clone(), &config.encoder, &mut store, &mut rng)?;
        Ok(CamseModel {
            config,
            vocab,
            store,
            embeddings,
            encoder,
            scorer,
        })
    }

    /// Reassembles a model from a stored parameter set (see the checkpoint module).
    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, mut store: ParamStore) -> Result<Self> {
        config.validate()?;
        let embeddings = store
            .id(EMBEDDINGS_PARAM)
            .ok_or_else(|| Error::Corrupt("checkpoint has no embedding table".into()))?;
        let table = EmbeddingTable::new(store.value(embeddings).clone())?;
        check_table(&config, &vocab, &table)?;
        store.get_mut(embeddings).trainable = config.fine_tune_embeddings;
        let encoder = CamseEncoder::bind(config.encoder.clone(), &store)?;
        let scorer = Scorer::bind(config.scoring.clone(), &config.encoder, &store)?;
        Ok(CamseModel {
            config,
            vocab,
            store,
            embeddings,
            encoder,
            scorer,
        })
    }

    pub fn table(&self) -> Result<EmbeddingTable> {
        EmbeddingTable::new(self.store.value(self.embeddings).clone())
    }

    /// `question ⊕ choice`, truncated to the statement limit.
    pub fn statement(&self, question: &TokenSequence, choice: &TokenSequence) -> Result<TokenSequence> {
        truncate(
            &question.concat(choice, None),
            self.config.limits.max_statement_len,
            self.config.encoder.scales,
        )
    }

    pub fn document(&self, doc: &TokenSequence) -> Result<TokenSequence> {
        truncate(doc, self.config.limits.max_document_len, self.config.encoder.scales)
    }

    /// Word vectors of `seq` as an `n x d` node.
    pub fn words<'t>(&self, tape: &'t Tape, seq: &TokenSequence) -> Result<Var<'t>> {
        tape.param(&self.store, self.embeddings).gather_rows(&seq.ids)
    }

    pub fn encode<'t>(
        &self,
        tape: &'t Tape,
        seq: &TokenSequence,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<EncodedSentence<'t>> {
        let words = self.words(tape, seq)?;
        self.encoder.encode(tape, &self.store, words, mode, rng)
    }

    pub fn score_pair<'t>(
        &self,
        tape: &'t Tape,
        statement: &EncodedSentence<'t>,
        document: &EncodedSentence<'t>,
    ) -> Result<PairScore<'t>> {
        self.scorer.score_pair(tape, &self.store, statement, document)
    }

    /// Encodes the statement once and sums pair scores over the first
    /// `evidence_cap` documents in order. Inputs are used as given (no truncation).
    pub fn candidate_score<'t>(
        &self,
        tape: &'t Tape,
        statement: &TokenSequence,
        docs: &[TokenSequence],
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<CandidateScore<'t>> {
        let docs = &docs[..docs.len().min(self.config.limits.evidence_cap)];
        if docs.is_empty() {
            return Ok(CandidateScore {
                score: tape.constant(crate::numerics::Tensor::scalar(0.0)),
                pairs: Vec::new(),
                no_evidence: true,
            });
        }
        let s = self.encode(tape, statement, mode, rng)?;
        let mut pairs = Vec::with_capacity(docs.len());
        for doc in docs {
            let d = self.encode(tape, doc, mode, rng)?;
            pairs.push(self.score_pair(tape, &s, &d)?);
        }
        let scores: Vec<Var<'t>> = pairs.iter().map(|p| p.score).collect();
        Ok(CandidateScore {
            score: tape.add_all(&scores)?,
            pairs,
            no_evidence: false,
        })
    }

    /// Scores every candidate of an instance after applying the limits.
    pub fn instance_scores<'t>(
        &self,
        tape: &'t Tape,
        inst: &QaInstance,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Vec<CandidateScore<'t>>> {
        let mut out = Vec::with_capacity(inst.num_choices());
        for (c, choice) in inst.choices.iter().enumerate() {
            let statement = self.statement(&inst.question, choice)?;
            let docs = inst.evidence[c]
                .iter()
                .take(self.config.limits.evidence_cap)
                .map(|d| self.document(d))
                .collect::<Result<Vec<_>>>()?;
            let scored = self.candidate_score(tape, &statement, &docs, mode, rng)?;
            if scored.no_evidence {
                log::debug!("instance {}: choice {c} has no evidence and scores 0", inst.id);
            }
            out.push(scored);
        }
        let counts: Vec<usize> = out.iter().map(|c| c.pairs.len()).collect();
        if counts.iter().any(|&n| n != counts[0]) {
            log::debug!("instance {}: unequal evidence counts per choice {counts:?}", inst.id);
        }
        Ok(out)
    }

    /// Candidate reliabilities in inference mode.
    pub fn score_instance(&self, inst: &QaInstance) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        Ok(self
            .instance_scores(&tape, inst, Mode::Eval, &mut rng)?
            .iter()
            .map(|c| c.score.item())
            .collect())
    }
}

fn check_table(config: &ModelConfig, vocab: &Vocabulary, table: &EmbeddingTable) -> Result<()> {
    if table.dim() != config.encoder.embed_dim {
        return Err(Error::Config(format!(
            "embedding width {} does not match encoder.embed_dim {}",
            table.dim(),
            config.encoder.embed_dim
        )));
    }
    if table.len() != vocab.len() {
        return Err(Error::Config(format!(
            "embedding table has {} rows for a vocabulary of {}",
            table.len(),
            vocab.len()
        )));
    }
    Ok(())
}
