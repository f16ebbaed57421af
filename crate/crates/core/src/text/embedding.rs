use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{TokenSequence, Vocabulary, OOV};
use crate::error::{Error, Result};
use crate::numerics::{uniform, Tensor};

/// Bound of the uniform distribution used when no vectors are supplied.
const RANDOM_INIT_BOUND: f64 = 0.1;

/// `|V| x d` word vectors; row 0 (OOV) is always zero.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    matrix: Tensor,
}

impl EmbeddingTable {
    pub fn new(mut matrix: Tensor) -> Result<Self> {
        if matrix.shape().len() != 2 || matrix.rows() == 0 {
            return Err(Error::Corrupt(format!(
                "embedding matrix must be 2-D with an OOV row, got {:?}",
                matrix.shape()
            )));
        }
        if !matrix.is_finite() {
            return Err(Error::Corrupt("embedding matrix has non-finite values".into()));
        }
        let d = matrix.cols();
        matrix.data_mut()[..d].fill(0.0);
        Ok(EmbeddingTable { matrix })
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() <= 1
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn into_matrix(self) -> Tensor {
        self.matrix
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.matrix.row(id)
    }

    /// `n x d` matrix of the sequence's vectors; OOV rows are zero.
    pub fn lookup(&self, seq: &TokenSequence) -> Result<Tensor> {
        let d = self.dim();
        let mut data = Vec::with_capacity(seq.len() * d);
        for &id in &seq.ids {
            if id >= self.len() {
                return Err(Error::Corrupt(format!(
                    "token id {id} out of range for an embedding table of {} rows",
                    self.len()
                )));
            }
            data.extend_from_slice(self.row(id));
        }
        Tensor::new(vec![seq.len(), d], data)
    }
}

/// Seeded uniform `±0.1` vectors for every id of `vocab`; row 0 stays zero.
pub fn random_embeddings(vocab: &Vocabulary, dim: usize, seed: u64) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let matrix = uniform(&mut rng, &[vocab.len(), dim], RANDOM_INIT_BOUND);
    EmbeddingTable::new(matrix).expect("finite random table")
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<(Vocabulary, EmbeddingTable)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, &path.display().to_string())
}

/// Parses the word2vec-style text format: a `<count> <dim>` header followed
/// by one `token v1 .. vdim` line per word.
pub fn parse_embeddings(text: &str, source: &str) -> Result<(Vocabulary, EmbeddingTable)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (header_no, header) = lines
        .next()
        .ok_or_else(|| Error::parse(source, 1, "missing header line"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let parse_usize = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::parse(source, header_no + 1, format!("invalid {what} {s:?} in header")))
    };
    if fields.len() != 2 {
        return Err(Error::parse(source, header_no + 1, "header must be \"<vocab_size> <dim>\""));
    }
    let count = parse_usize(fields[0], "vocabulary size")?;
    let dim = parse_usize(fields[1], "dimension")?;
    if dim == 0 {
        return Err(Error::parse(source, header_no + 1, "dimension must be positive"));
    }

    let mut vocab = Vocabulary::new();
    let mut data = vec![0.0; dim];
    for (no, line) in lines {
        let line_no = no + 1;
        let mut parts = line.split_whitespace();
        let token = parts.next().expect("non-empty line");
        if vocab.contains(token) {
            return Err(Error::parse(source, line_no, format!("duplicate token {token:?}")));
        }
        let values: Vec<f64> = parts
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::parse(source, line_no, format!("invalid value {v:?}")))
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::parse(
                source,
                line_no,
                format!("expected {dim} values for {token:?}, found {}", values.len()),
            ));
        }
        vocab.insert(token);
        data.extend(values);
    }
    if vocab.len() - 1 != count {
        return Err(Error::parse(
            source,
            header_no + 1,
            format!("header declares {count} words but {} were read", vocab.len() - 1),
        ));
    }
    let table = EmbeddingTable::new(Tensor::new(vec![vocab.len(), dim], data)?)?;
    debug_assert_eq!(table.row(OOV).iter().copied().fold(0.0, f64::max), 0.0);
    Ok((vocab, table))
}

/// Writes `vocab` and `table` in the format read by [`load_embeddings`].
pub fn write_embeddings(path: impl AsRef<Path>, vocab: &Vocabulary, table: &EmbeddingTable) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    let _ = writeln!(out, "{} {}", vocab.len() - 1, table.dim());
    for (i, token) in vocab.tokens().iter().enumerate() {
        out.push_str(token);
        for v in table.row(i + 1) {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
