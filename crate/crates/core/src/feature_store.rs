//! On-disk feature format and the in-memory dataset.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! "CELD" | version u32 = 1 | n_records u64 | hidden_dim u32 | num_labels u32
//! label names: num_labels x (len u16 | UTF-8 bytes)
//! per record:  id u64 | h_last f32 x hidden_dim | h_verb f32 x num_labels
//!              | pseudo_label u32 | has_true u8 | true_label u32 (only if has_true = 1)
//! ```
//!
//! A JSON-lines variant (header line, then one record per line) is selected by a
//! `.jsonl` extension and exists for debugging.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"CELD";
pub const VERSION: u32 = 1;

/// Tolerance on `sum(h_verb) == 1`.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes: expected \"CELD\"")]
    BadMagic,
    #[error("unsupported feature file version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unexpected end of file at byte {0}")]
    UnexpectedEof(u64),
    #[error("trailing bytes after last record at byte {0}")]
    TrailingBytes(u64),
    #[error(
        "dimension mismatch at record {record}: {field} has length {found}, expected {expected}"
    )]
    DimensionMismatch {
        record: usize,
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {field} at record {record}")]
    NonFinite { record: usize, field: &'static str },
    #[error("verbalizer distribution not normalized at record {record} (sum = {sum})")]
    NotNormalized { record: usize, sum: f64 },
    #[error("label out of range at record {record}: {label} >= {num_labels}")]
    LabelOutOfRange {
        record: usize,
        label: u32,
        num_labels: usize,
    },
    #[error("duplicate id {id} at record {record}")]
    DuplicateId { record: usize, id: u64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("unknown record id {0}")]
    UnknownId(u64),
    #[error("label {label} for id {id} out of range (num_labels = {num_labels})")]
    AnswerOutOfRange {
        id: u64,
        label: u32,
        num_labels: usize,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("JSON-lines parse error at line {line}: {message}")]
    JsonLine { line: usize, message: String },
}

/// One example: pooled hidden vector, verbalizer distribution and labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: u64,
    pub h_last: Vec<f32>,
    pub h_verb: Vec<f32>,
    pub pseudo_label: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_label: Option<u32>,
}

impl FeatureRecord {
    /// Check this record against the dataset metadata. `index` is only used
    /// for error messages.
    pub fn validate(
        &self,
        index: usize,
        hidden_dim: usize,
        num_labels: usize,
    ) -> Result<(), FeatureError> {
        if self.h_last.len() != hidden_dim {
            return Err(FeatureError::DimensionMismatch {
                record: index,
                field: "h_last",
                expected: hidden_dim,
                found: self.h_last.len(),
            });
        }
        if self.h_verb.len() != num_labels {
            return Err(FeatureError::DimensionMismatch {
                record: index,
                field: "h_verb",
                expected: num_labels,
                found: self.h_verb.len(),
            });
        }
        if self.h_last.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite {
                record: index,
                field: "h_last",
            });
        }
        if self.h_verb.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite {
                record: index,
                field: "h_verb",
            });
        }
        let sum: f64 = self.h_verb.iter().map(|&v| v as f64).sum();
        if self.h_verb.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(FeatureError::NotNormalized { record: index, sum });
        }
        for label in std::iter::once(self.pseudo_label).chain(self.true_label) {
            if label as usize >= num_labels {
                return Err(FeatureError::LabelOutOfRange {
                    record: index,
                    label,
                    num_labels,
                });
            }
        }
        Ok(())
    }
}

/// Ordered records plus label-space and dimensionality metadata.
///
/// Construction always validates, so a `FeatureDataset` in hand satisfies every
/// record invariant, has unique ids and at least one record.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    records: Vec<FeatureRecord>,
    num_labels: usize,
    hidden_dim: usize,
    label_names: Vec<String>,
}

impl FeatureDataset {
    pub fn new(
        records: Vec<FeatureRecord>,
        hidden_dim: usize,
        label_names: Vec<String>,
    ) -> Result<Self, FeatureError> {
        let num_labels = label_names.len();
        if num_labels == 0 {
            return Err(FeatureError::MalformedHeader(
                "num_labels must be positive".into(),
            ));
        }
        if hidden_dim == 0 {
            return Err(FeatureError::MalformedHeader(
                "hidden_dim must be positive".into(),
            ));
        }
        if records.is_empty() {
            return Err(FeatureError::EmptyDataset);
        }
        let mut seen = HashSet::with_capacity(records.len());
        for (i, record) in records.iter().enumerate() {
            record.validate(i, hidden_dim, num_labels)?;
            if !seen.insert(record.id) {
                return Err(FeatureError::DuplicateId {
                    record: i,
                    id: record.id,
                });
            }
        }
        Ok(Self {
            records,
            num_labels,
            hidden_dim,
            label_names,
        })
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn ids(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.id).collect()
    }

    pub fn pseudo_labels(&self) -> Vec<usize> {
        self.records
            .iter()
            .map(|r| r.pseudo_label as usize)
            .collect()
    }

    pub fn true_labels(&self) -> Vec<Option<usize>> {
        self.records
            .iter()
            .map(|r| r.true_label.map(|l| l as usize))
            .collect()
    }

    /// Number of records carrying a true label.
    pub fn labeled_count(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.true_label.is_some())
            .count()
    }

    /// Subset by position, keeping metadata.
    pub fn select(&self, indices: &[usize]) -> Result<Self, FeatureError> {
        let records = indices.iter().map(|&i| self.records[i].clone()).collect();
        Self::new(records, self.hidden_dim, self.label_names.clone())
    }

    /// Copy with every pseudo-label replaced.
    pub fn with_pseudo_labels(&self, labels: &[usize]) -> Result<Self, FeatureError> {
        assert_eq!(labels.len(), self.records.len());
        let records = self
            .records
            .iter()
            .zip(labels)
            .map(|(r, &l)| FeatureRecord {
                pseudo_label: l as u32,
                ..r.clone()
            })
            .collect();
        Self::new(records, self.hidden_dim, self.label_names.clone())
    }

    pub fn into_records(self) -> Vec<FeatureRecord> {
        self.records
    }
}

/// Set `true_label` on the mapped records; everything else is untouched.
pub fn merge_true_labels(
    dataset: &FeatureDataset,
    labels: &BTreeMap<u64, u32>,
) -> Result<FeatureDataset, FeatureError> {
    let index: BTreeMap<u64, usize> = dataset
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id, i))
        .collect();
    let mut records = dataset.records.clone();
    for (&id, &label) in labels {
        let &i = index.get(&id).ok_or(FeatureError::UnknownId(id))?;
        if label as usize >= dataset.num_labels {
            return Err(FeatureError::AnswerOutOfRange {
                id,
                label,
                num_labels: dataset.num_labels,
            });
        }
        records[i].true_label = Some(label);
    }
    FeatureDataset::new(records, dataset.hidden_dim, dataset.label_names.clone())
}

/// Header fields and records as they appear in a file, before any invariant
/// check beyond what is needed to frame the bytes.
#[derive(Debug, Clone)]
pub struct RawFeatureFile {
    pub hidden_dim: usize,
    pub label_names: Vec<String>,
    pub records: Vec<FeatureRecord>,
}

impl RawFeatureFile {
    /// Every invariant violation, in record order. Used by `validate` to report
    /// more than the first problem.
    pub fn violations(&self) -> Vec<FeatureError> {
        let num_labels = self.label_names.len();
        let mut out = Vec::new();
        if self.records.is_empty() {
            out.push(FeatureError::EmptyDataset);
        }
        let mut seen = HashSet::new();
        for (i, record) in self.records.iter().enumerate() {
            if let Err(e) = record.validate(i, self.hidden_dim, num_labels) {
                out.push(e);
            }
            if !seen.insert(record.id) {
                out.push(FeatureError::DuplicateId {
                    record: i,
                    id: record.id,
                });
            }
        }
        out
    }

    pub fn into_dataset(self) -> Result<FeatureDataset, FeatureError> {
        FeatureDataset::new(self.records, self.hidden_dim, self.label_names)
    }
}

fn is_jsonl(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "jsonl")
}

/// Read and fully validate a feature file (binary, or JSON lines for `.jsonl`).
pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureDataset, FeatureError> {
    read_raw_feature_file(path)?.into_dataset()
}

pub fn read_raw_feature_file(path: impl AsRef<Path>) -> Result<RawFeatureFile, FeatureError> {
    let path = path.as_ref();
    if is_jsonl(path) {
        read_jsonl(BufReader::new(fs::File::open(path)?))
    } else {
        decode(&fs::read(path)?)
    }
}

pub fn write_feature_file(
    dataset: &FeatureDataset,
    path: impl AsRef<Path>,
) -> Result<(), FeatureError> {
    let path = path.as_ref();
    if is_jsonl(path) {
        write_jsonl(dataset, BufWriter::new(fs::File::create(path)?))
    } else {
        fs::write(path, encode(dataset))?;
        Ok(())
    }
}

/// Size in bytes of the binary encoding.
pub fn encoded_len(dataset: &FeatureDataset) -> usize {
    let header = 4 + 4 + 8 + 4 + 4;
    let names: usize = dataset.label_names.iter().map(|n| 2 + n.len()).sum();
    let per_record_base = 8 + 4 * dataset.hidden_dim + 4 * dataset.num_labels + 4 + 1;
    let records: usize = dataset
        .records
        .iter()
        .map(|r| per_record_base + if r.true_label.is_some() { 4 } else { 0 })
        .sum();
    header + names + records
}

pub fn encode(dataset: &FeatureDataset) -> Vec<u8> {
    let mut buf = Vec::with_capacity(encoded_len(dataset));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(dataset.records.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(dataset.hidden_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(dataset.num_labels as u32).to_le_bytes());
    for name in &dataset.label_names {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
    }
    for r in &dataset.records {
        buf.extend_from_slice(&r.id.to_le_bytes());
        for v in r.h_last.iter().chain(&r.h_verb) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&r.pseudo_label.to_le_bytes());
        match r.true_label {
            Some(label) => {
                buf.push(1);
                buf.extend_from_slice(&label.to_le_bytes());
            }
            None => buf.push(0),
        }
    }
    buf
}

/// Little-endian cursor that reports the offset where data ran out.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FeatureError> {
        if self.bytes.len() - self.pos < n {
            return Err(FeatureError::UnexpectedEof(self.bytes.len() as u64));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], FeatureError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, FeatureError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FeatureError> {
        self.array().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32, FeatureError> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64, FeatureError> {
        self.array().map(u64::from_le_bytes)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FeatureError> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }
}

/// Decode the binary layout. Only framing is checked here; see
/// [`RawFeatureFile::into_dataset`] for the invariants.
pub fn decode(bytes: &[u8]) -> Result<RawFeatureFile, FeatureError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if &cur.array::<4>()? != MAGIC {
        return Err(FeatureError::BadMagic);
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(FeatureError::UnsupportedVersion(version));
    }
    let n_records = cur.u64()?;
    let hidden_dim = cur.u32()? as usize;
    let num_labels = cur.u32()? as usize;
    if hidden_dim == 0 || num_labels == 0 {
        return Err(FeatureError::MalformedHeader(format!(
            "hidden_dim = {hidden_dim}, num_labels = {num_labels}"
        )));
    }
    let mut label_names = Vec::with_capacity(num_labels);
    for i in 0..num_labels {
        let len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| FeatureError::MalformedHeader(format!("label name {i} is not UTF-8")))?;
        label_names.push(name.to_owned());
    }
    let min_record = 8 + 4 * (hidden_dim + num_labels) + 5;
    let remaining = (bytes.len() - cur.pos) as u64;
    // Every record needs at least `min_record` bytes; fail before allocating.
    if n_records.saturating_mul(min_record as u64) > remaining {
        return Err(FeatureError::UnexpectedEof(bytes.len() as u64));
    }
    let mut records = Vec::with_capacity(n_records as usize);
    for _ in 0..n_records {
        let id = cur.u64()?;
        let h_last = cur.f32s(hidden_dim)?;
        let h_verb = cur.f32s(num_labels)?;
        let pseudo_label = cur.u32()?;
        let true_label = match cur.u8()? {
            0 => None,
            1 => Some(cur.u32()?),
            flag => {
                return Err(FeatureError::MalformedHeader(format!(
                    "record {}: has_true flag {flag} is neither 0 nor 1",
                    records.len()
                )))
            }
        };
        records.push(FeatureRecord {
            id,
            h_last,
            h_verb,
            pseudo_label,
            true_label,
        });
    }
    if cur.pos != bytes.len() {
        return Err(FeatureError::TrailingBytes(cur.pos as u64));
    }
    Ok(RawFeatureFile {
        hidden_dim,
        label_names,
        records,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonlHeader {
    hidden_dim: usize,
    num_labels: usize,
    label_names: Vec<String>,
}

fn read_jsonl(reader: impl BufRead) -> Result<RawFeatureFile, FeatureError> {
    let mut lines = reader
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
    let (_, first) = lines
        .next()
        .ok_or_else(|| FeatureError::MalformedHeader("missing header line".into()))?;
    let header: JsonlHeader =
        serde_json::from_str(&first?).map_err(|e| FeatureError::JsonLine {
            line: 1,
            message: e.to_string(),
        })?;
    if header.label_names.len() != header.num_labels {
        return Err(FeatureError::MalformedHeader(format!(
            "num_labels = {} but {} label names",
            header.num_labels,
            header.label_names.len()
        )));
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let record = serde_json::from_str(&line?).map_err(|e| FeatureError::JsonLine {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(RawFeatureFile {
        hidden_dim: header.hidden_dim,
        label_names: header.label_names,
        records,
    })
}

fn write_jsonl(dataset: &FeatureDataset, mut out: impl Write) -> Result<(), FeatureError> {
    let header = JsonlHeader {
        hidden_dim: dataset.hidden_dim,
        num_labels: dataset.num_labels,
        label_names: dataset.label_names.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for record in &dataset.records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read a JSON object mapping record id to label index, e.g. `{"3": 1, "17": 0}`.
pub fn read_label_map(path: impl AsRef<Path>) -> Result<BTreeMap<u64, u32>, FeatureError> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_label_map(
    labels: &BTreeMap<u64, u32>,
    path: impl AsRef<Path>,
) -> Result<(), FeatureError> {
    fs::write(path, serde_json::to_string_pretty(labels)?)?;
    Ok(())
}
