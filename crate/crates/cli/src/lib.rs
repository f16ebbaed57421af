//! Command implementations behind the `camse` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use camse_core::checkpoint::{load_checkpoint, save_checkpoint, Precision};
use camse_core::config::RunConfig;
use camse_core::numerics::{Mode, Tape};
use camse_core::qa::{
    predict, predict_instance, read_dataset, tokenize_records, train, write_dataset, CamseModel, EpochMetrics,
    Evaluation, QaInstance, QaRecord,
};
use camse_core::retrieval::{read_corpus, InvertedIndex};
use camse_core::synth::{gen_corpus, CorpusKind};
use camse_core::text::{dedup_train, load_embeddings, random_embeddings, tokenize, truncate, write_embeddings, Vocabulary};
use camse_core::Error;

mod render;

pub use render::{attention_csv, attention_png};

#[derive(Debug, Parser)]
#[command(name = "camse", version, about = "Evidence-based multiple-choice QA with multi-scale sentence embedding tensors")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for evaluation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Store checkpoints at 64-bit precision.
    #[arg(long = "f64", global = true)]
    pub f64: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a BM25 index from a corpus with one document per line.
    Index { corpus: PathBuf, out: PathBuf },
    /// Generate a synthetic corpus (train.jsonl, test.jsonl, embeddings.txt).
    Synth {
        kind: Kind,
        out_dir: PathBuf,
    },
    /// Train a model; paths come from the config file.
    Train,
    /// Accuracy of a checkpoint on a dataset.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        /// Write the per-instance report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Predict answers for the instances in a dataset file.
    Answer { checkpoint: PathBuf, input: PathBuf },
    /// Attention weights for a sentence, as JSON plus optional CSV/PNG files.
    DumpAttention {
        checkpoint: PathBuf,
        text: String,
        /// Directory for per-scale CSV and PNG heatmaps.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Matching/association matrices, gates and score for one pair.
    DumpScores {
        checkpoint: PathBuf,
        statement: String,
        document: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Entity,
    Association,
}

impl From<Kind> for CorpusKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Entity => CorpusKind::Entity,
            Kind::Association => CorpusKind::Association,
        }
    }
}

/// Error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_USAGE,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Corrupt(_)
            | Error::EmptySequence(_)
            | Error::SequenceTooShort { .. } => EXIT_IO,
            _ => EXIT_RUNTIME,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        message: msg.into(),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    Error::io(path, e).into()
}

pub type CliResult<T> = Result<T, CliError>;

/// Loads the config file (or defaults) and applies command-line overrides.
pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if cli.f64 {
        cfg.f64_checkpoint = true;
    }
    cfg.validate()?;
    cfg.train.seed = cfg.train_seed();
    cfg.synth.seed = cfg.seed;
    Ok(cfg)
}

pub fn run(cli: Cli) -> CliResult<()> {
    let cfg = resolve_config(&cli)?;
    let mut out = std::io::stdout().lock();
    let mut say = |s: String| writeln!(out, "{s}").map_err(|e| io_err(Path::new("<stdout>"), e));
    match cli.command {
        Command::Index { corpus, out } => {
            let index = cmd_index(&corpus, &out)?;
            say(format!("indexed {} documents, {} terms -> {}", index.num_docs(), index.num_terms(), out.display()))
        }
        Command::Synth { kind, out_dir } => {
            let (train, test) = cmd_synth(kind.into(), &cfg, &out_dir)?;
            say(format!("wrote {train} train and {test} test records to {}", out_dir.display()))
        }
        Command::Train => {
            let summary = cmd_train(&cfg)?;
            say(serde_json::to_string(&summary).expect("summary serializes"))
        }
        Command::Eval {
            checkpoint,
            dataset,
            report,
        } => {
            let eval = cmd_eval(&checkpoint, &dataset, cfg.threads)?;
            if let Some(path) = report {
                write_json(&path, &eval)?;
            }
            say(format!("accuracy {} ({}/{})", eval.accuracy, eval.correct, eval.total))
        }
        Command::Answer { checkpoint, input } => {
            for a in cmd_answer(&checkpoint, &input)? {
                say(serde_json::to_string(&a).expect("answer serializes"))?;
            }
            Ok(())
        }
        Command::DumpAttention {
            checkpoint,
            text,
            out_dir,
        } => {
            let dump = cmd_dump_attention(&checkpoint, &text)?;
            if let Some(dir) = out_dir {
                write_attention_files(&dump, &dir)?;
            }
            say(serde_json::to_string_pretty(&dump).expect("dump serializes"))
        }
        Command::DumpScores {
            checkpoint,
            statement,
            document,
        } => {
            let dump = cmd_dump_scores(&checkpoint, &statement, &document)?;
            say(serde_json::to_string_pretty(&dump).expect("dump serializes"))
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

pub fn cmd_index(corpus: &Path, out: &Path) -> CliResult<InvertedIndex> {
    let docs = read_corpus(corpus)?;
    let index = InvertedIndex::build(&docs)?;
    index.save(out)?;
    Ok(index)
}

/// Returns the train and test record counts.
pub fn cmd_synth(kind: CorpusKind, cfg: &RunConfig, out_dir: &Path) -> CliResult<(usize, usize)> {
    let corpus = gen_corpus(kind, &cfg.synth)?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    write_dataset(out_dir.join("train.jsonl"), &corpus.train)?;
    write_dataset(out_dir.join("test.jsonl"), &corpus.test)?;
    write_embeddings(out_dir.join("embeddings.txt"), &corpus.vocab, &corpus.table)?;
    Ok((corpus.train.len(), corpus.test.len()))
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_dev_accuracy: Option<f64>,
    pub final_train_loss: f64,
    pub train_instances: usize,
    pub dropped_as_duplicates: usize,
    pub test_accuracy: Option<f64>,
    pub checkpoint: Option<PathBuf>,
}

fn vocab_from_records(records: &[&[QaRecord]]) -> Vocabulary {
    let mut tokens: Vec<&str> = Vec::new();
    for set in records {
        for r in *set {
            let texts = std::iter::once(&r.question)
                .chain(&r.choices)
                .chain(r.evidence.iter().flatten());
            tokens.extend(texts.flat_map(|t| t.split_whitespace()));
        }
    }
    tokens.sort_unstable();
    tokens.dedup();
    Vocabulary::from_tokens(tokens).expect("deduplicated tokens")
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<TrainSummary> {
    let mut cfg = cfg.clone();
    let train_path = cfg
        .paths
        .train
        .clone()
        .ok_or_else(|| usage("paths.train must be set to train"))?;
    let mut train_records = read_dataset(&train_path)?;
    let dev_records = cfg.paths.dev.as_ref().map(read_dataset).transpose()?.unwrap_or_default();
    let test_records = cfg.paths.test.as_ref().map(read_dataset).transpose()?;

    let before = train_records.len();
    if let (true, Some(test)) = (cfg.dedup, &test_records) {
        train_records = dedup_train(train_records, test, |r| r.question.as_str(), cfg.dedup_threshold)?;
    }
    let dropped = before - train_records.len();
    if dropped > 0 {
        log::info!("dropped {dropped} training questions similar to test questions");
    }

    let (vocab, table) = match &cfg.paths.embeddings {
        Some(p) => load_embeddings(p)?,
        None => {
            let vocab = vocab_from_records(&[&train_records, &dev_records]);
            let table = random_embeddings(&vocab, cfg.model.encoder.embed_dim, cfg.seed);
            (vocab, table)
        }
    };
    if table.dim() != cfg.model.encoder.embed_dim {
        log::info!("using embedding width {} from the embedding file", table.dim());
        cfg.model.encoder.embed_dim = table.dim();
    }
    let train_set = tokenize_records(&train_records, &vocab)?;
    let dev_set = tokenize_records(&dev_records, &vocab)?;

    let mut model = CamseModel::new(cfg.model.clone(), vocab, &table, cfg.seed)?;
    let mut metrics = match &cfg.paths.metrics {
        Some(p) => Some((p.clone(), fs::File::create(p).map_err(|e| io_err(p, e))?)),
        None => None,
    };
    let report = train(&mut model, &train_set, &dev_set, &cfg.train, |m: &EpochMetrics| {
        if let Some((path, f)) = metrics.as_mut() {
            let line = serde_json::to_string(m).expect("metrics serialize");
            writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    })?;
    let precision = if cfg.f64_checkpoint { Precision::F64 } else { Precision::F32 };
    if let Some(p) = &cfg.paths.checkpoint {
        save_checkpoint(p, &cfg, &model, precision)?;
    }
    let test_accuracy = match &test_records {
        Some(recs) if !recs.is_empty() => {
            let test = tokenize_records(recs, &model.vocab)?;
            Some(evaluate_parallel(&model, &test, cfg.threads)?.accuracy)
        }
        _ => None,
    };
    Ok(TrainSummary {
        best_epoch: report.best_epoch,
        best_dev_accuracy: report.best_dev_accuracy,
        final_train_loss: report.history.last().map_or(f64::NAN, |h| h.train_loss),
        train_instances: train_set.len(),
        dropped_as_duplicates: dropped,
        test_accuracy,
        checkpoint: cfg.paths.checkpoint.clone(),
    })
}

/// Evaluation over a worker pool; results are collected in input order.
pub fn evaluate_parallel(model: &CamseModel, data: &[QaInstance], threads: usize) -> CliResult<Evaluation> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| CliError {
            code: EXIT_RUNTIME,
            message: format!("cannot start worker pool: {e}"),
        })?;
    let predictions = pool.install(|| {
        data.par_iter()
            .map(|inst| predict_instance(model, inst))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(Evaluation::from_predictions(predictions)?)
}

pub fn cmd_eval(checkpoint: &Path, dataset: &Path, threads: usize) -> CliResult<Evaluation> {
    let (_, model) = load_checkpoint(checkpoint)?;
    let data = tokenize_records(&read_dataset(dataset)?, &model.vocab)?;
    evaluate_parallel(&model, &data, threads)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Answer {
    pub id: String,
    pub predicted: usize,
    pub choice: String,
    pub scores: Vec<f64>,
}

pub fn cmd_answer(checkpoint: &Path, input: &Path) -> CliResult<Vec<Answer>> {
    let (_, model) = load_checkpoint(checkpoint)?;
    let records = read_dataset(input)?;
    let data = tokenize_records(&records, &model.vocab)?;
    data.iter()
        .zip(&records)
        .map(|(inst, rec)| {
            let scores = model.score_instance(inst)?;
            let predicted = predict(&scores);
            Ok(Answer {
                id: inst.id.clone(),
                predicted,
                choice: rec.choices[predicted].clone(),
                scores,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScaleAttention {
    pub window: usize,
    /// Tokens covered by each convolution position.
    pub units: Vec<String>,
    /// `units.len()` rows of `r` weights; each column sums to 1.
    pub weights: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionDump {
    pub tokens: Vec<String>,
    pub subspaces: usize,
    pub scales: Vec<ScaleAttention>,
}

fn sentence(model: &CamseModel, text: &str, max_len: usize) -> CliResult<camse_core::text::TokenSequence> {
    let seq = tokenize(text, &model.vocab)?;
    Ok(truncate(&seq, max_len, model.config.encoder.scales)?)
}

pub fn cmd_dump_attention(checkpoint: &Path, text: &str) -> CliResult<AttentionDump> {
    let (_, model) = load_checkpoint(checkpoint)?;
    let seq = sentence(&model, text, model.config.limits.max_statement_len)?;
    let tape = Tape::new();
    let enc = model.encode(&tape, &seq, Mode::Eval, &mut rand_free())?;
    let scales = enc
        .scales
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let a = s.attention.value();
            let window = i + 1;
            ScaleAttention {
                window,
                units: (0..a.rows()).map(|t| seq.raw[t..t + window].join(" ")).collect(),
                weights: (0..a.rows()).map(|t| a.row(t).to_vec()).collect(),
            }
        })
        .collect();
    Ok(AttentionDump {
        tokens: seq.raw.clone(),
        subspaces: model.config.encoder.subspaces,
        scales,
    })
}

fn write_attention_files(dump: &AttentionDump, dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_json(&dir.join("attention.json"), dump)?;
    for s in &dump.scales {
        let csv_path = dir.join(format!("scale{}.csv", s.window));
        fs::write(&csv_path, attention_csv(s)).map_err(|e| io_err(&csv_path, e))?;
        let png_path = dir.join(format!("scale{}.png", s.window));
        attention_png(s)
            .save(&png_path)
            .map_err(|e| CliError {
                code: EXIT_IO,
                message: format!("{}: {e}", png_path.display()),
            })?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScaleScores {
    pub window: usize,
    /// `r x r`: matching scores on the diagonal, association scores elsewhere.
    pub combined: Vec<Vec<f64>>,
    pub gate: Vec<Vec<f64>>,
    pub o_sms: f64,
    pub o_sas: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreDump {
    pub subspaces: usize,
    pub scales: Vec<ScaleScores>,
    pub score: f64,
}

pub fn cmd_dump_scores(checkpoint: &Path, statement: &str, document: &str) -> CliResult<ScoreDump> {
    let (_, model) = load_checkpoint(checkpoint)?;
    let s = sentence(&model, statement, model.config.limits.max_statement_len)?;
    let d = sentence(&model, document, model.config.limits.max_document_len)?;
    let tape = Tape::new();
    let mut rng = rand_free();
    let se = model.encode(&tape, &s, Mode::Eval, &mut rng)?;
    let de = model.encode(&tape, &d, Mode::Eval, &mut rng)?;
    let pack = model.score_pair(&tape, &se, &de)?.pack();
    let r = model.config.encoder.subspaces;
    let square = |v: &[f64]| v.chunks(r).map(<[f64]>::to_vec).collect::<Vec<_>>();
    Ok(ScoreDump {
        subspaces: r,
        scales: pack
            .scales
            .iter()
            .enumerate()
            .map(|(i, p)| ScaleScores {
                window: i + 1,
                combined: square(&p.combined()),
                gate: square(&p.gate),
                o_sms: p.o_sms,
                o_sas: p.o_sas,
            })
            .collect(),
        score: pack.score,
    })
}

/// Inference never draws random numbers; this satisfies the dropout signature.
fn rand_free() -> rand::rngs::mock::StepRng {
    rand::rngs::mock::StepRng::new(0, 0)
}
