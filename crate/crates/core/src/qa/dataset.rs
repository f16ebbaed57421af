//! Line-oriented JSON dataset files.
//!
//! Line 1 is a header `{"format":"camse-dataset","version":1,"count":N}`;
//! each following line is one [`QaRecord`]. Text fields are whitespace
//! tokenized.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{tokenize, TokenSequence, Vocabulary};

pub const DATASET_FORMAT: &str = "camse-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRecord {
    pub id: String,
    pub question: String,
    pub choices: Vec<String>,
    /// One list of evidence documents per choice; lists may be ragged.
    pub evidence: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<usize>,
}

impl QaRecord {
    pub fn validate(&self) -> Result<()> {
        let n = self.choices.len();
        if n < 2 {
            return Err(Error::Invalid(format!("instance {}: needs at least 2 choices, got {n}", self.id)));
        }
        if self.evidence.len() != n {
            return Err(Error::Invalid(format!(
                "instance {}: {} evidence lists for {n} choices",
                self.id,
                self.evidence.len()
            )));
        }
        if let Some(a) = self.answer.filter(|&a| a >= n) {
            return Err(Error::Invalid(format!("instance {}: answer {a} out of range for {n} choices", self.id)));
        }
        Ok(())
    }
}

/// A tokenized question with its candidates and evidence.
#[derive(Clone, Debug, PartialEq)]
pub struct QaInstance {
    pub id: String,
    pub question: TokenSequence,
    pub choices: Vec<TokenSequence>,
    pub evidence: Vec<Vec<TokenSequence>>,
    pub answer: Option<usize>,
}

impl QaInstance {
    pub fn from_record(record: &QaRecord, vocab: &Vocabulary) -> Result<Self> {
        record.validate()?;
        let tok = |what: &str, text: &str| {
            tokenize(text, vocab).map_err(|_| Error::EmptySequence(format!("instance {}: empty {what}", record.id)))
        };
        Ok(QaInstance {
            id: record.id.clone(),
            question: tok("question", &record.question)?,
            choices: record.choices.iter().map(|c| tok("choice", c)).collect::<Result<_>>()?,
            evidence: record
                .evidence
                .iter()
                .map(|docs| docs.iter().map(|d| tok("evidence document", d)).collect())
                .collect::<Result<_>>()?,
            answer: record.answer,
        })
    }

    pub fn num_choices(&self) -> usize {
        self.choices.len()
    }

    pub fn gold(&self) -> Result<usize> {
        self.answer
            .ok_or_else(|| Error::Invalid(format!("instance {} has no gold answer", self.id)))
    }
}

pub fn tokenize_records(records: &[QaRecord], vocab: &Vocabulary) -> Result<Vec<QaInstance>> {
    records.iter().map(|r| QaInstance::from_record(r, vocab)).collect()
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<QaRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, &path.display().to_string())
}

pub fn parse_dataset(text: &str, source: &str) -> Result<Vec<QaRecord>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::parse(source, 1, "missing dataset header"))?;
    let header: DatasetHeader =
        serde_json::from_str(first).map_err(|e| Error::parse(source, 1, format!("bad header: {e}")))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(Error::parse(
            source,
            1,
            format!("unsupported dataset {} v{}", header.format, header.version),
        ));
    }
    let mut records = Vec::with_capacity(header.count);
    for (i, line) in lines {
        let record: QaRecord = serde_json::from_str(line).map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
        record.validate().map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
        records.push(record);
    }
    if records.len() != header.count {
        return Err(Error::parse(
            source,
            1,
            format!("header declares {} records, found {}", header.count, records.len()),
        ));
    }
    Ok(records)
}

pub fn dataset_to_string(records: &[QaRecord]) -> String {
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        count: records.len(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[QaRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(dataset_to_string(records).as_bytes())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> QaRecord {
        QaRecord {
            id: "q1".into(),
            question: "fever and cough".into(),
            choices: vec!["flu".into(), "cold".into()],
            evidence: vec![vec!["flu causes fever".into()], vec![]],
            answer: Some(0),
        }
    }

    #[test]
    fn round_trip() {
        let recs = vec![record(), QaRecord { answer: None, ..record() }];
        let text = dataset_to_string(&recs);
        assert!(text.starts_with(r#"{"format":"camse-dataset","version":1,"count":2}"#));
        assert_eq!(parse_dataset(&text, "mem").unwrap(), recs);
    }

    #[test]
    fn count_and_validation_errors() {
        let mut text = dataset_to_string(&[record()]);
        text.push_str(&serde_json::to_string(&record()).unwrap());
        assert!(matches!(parse_dataset(&text, "mem"), Err(Error::Parse { line: 1, .. })));

        let bad = QaRecord { answer: Some(2), ..record() };
        let text = dataset_to_string(&[bad]);
        assert!(matches!(parse_dataset(&text, "mem"), Err(Error::Parse { line: 2, .. })));

        let one = QaRecord { choices: vec!["x".into()], evidence: vec![vec![]], ..record() };
        assert!(one.validate().is_err());
    }

    #[test]
    fn tokenized_instance_is_ragged() {
        let vocab = Vocabulary::from_tokens(["fever", "flu"]).unwrap();
        let inst = QaInstance::from_record(&record(), &vocab).unwrap();
        assert_eq!(inst.evidence[0].len(), 1);
        assert!(inst.evidence[1].is_empty());
        assert_eq!(inst.question.ids, vec![1, 0, 0]);
        assert_eq!(inst.gold().unwrap(), 0);
    }
}
