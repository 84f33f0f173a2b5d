//! Sample records, corpora, and selection batches, with jsonl and packed
//! on-disk formats.
//!
//! jsonl is the canonical interchange format: one record per line, all keys
//! always present in a fixed order (`id`, `embedding`, `probs`, `label`,
//! `audio`, `tags`), so write → load → write is byte-identical.
//!
//! The packed format targets k-NN-scale pools: a JSON manifest next to a
//! little-endian `f32` data file. Manifest schema (all keys required):
//!
//! ```json
//! {
//!   "format": "lsb-packed",
//!   "version": 1,
//!   "data_file": "<relative file name>",
//!   "embedding_dim": 64,
//!   "classes": 4,
//!   "audio_dim": null,
//!   "count": 2,
//!   "ids": ["a", "b"],
//!   "labels": [0, null],
//!   "audio_rows": null,
//!   "tags": [null, {"split": "pool"}]
//! }
//! ```
//!
//! The data file holds, per record in order: `embedding_dim` f32 values,
//! then `classes` f32 values, then (when `audio_rows` is present)
//! `audio_rows[i] * audio_dim` f32 values.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probability vectors must sum to 1 within this tolerance; out-of-tolerance
/// vectors are rejected, never renormalized.
pub const PROB_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("record {id:?}: {}", join_violations(.violations))]
    InvalidRecord { id: String, violations: Vec<Violation> },
    #[error("duplicate id {id:?}")]
    DuplicateId { id: String },
    #[error("empty corpus: cannot infer dims from zero records")]
    EmptyCorpus,
    #[error("unknown id {id:?}")]
    UnknownId { id: String },
    #[error("bad packed manifest: {0}")]
    BadManifest(String),
    #[error("packed data file truncated: expected {expected} bytes, found {found}")]
    TruncatedData { expected: u64, found: u64 },
    #[error("selection batch invalid: {0}")]
    BadBatch(String),
}

fn join_violations(violations: &[Violation]) -> String {
    violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

/// A single validation failure. `validate_record` reports every violation,
/// not just the first.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyId,
    EmbeddingLen { got: usize, want: usize },
    EmbeddingNotFinite { index: usize },
    ProbsLen { got: usize, want: usize },
    ProbEntryOutOfRange { index: usize, value: f64 },
    ProbsNotNormalized { sum: f64 },
    LabelOutOfRange { label: usize, classes: usize },
    AudioRowLen { row: usize, got: usize, want: usize },
    AudioEmpty,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyId => write!(f, "id is empty"),
            Violation::EmbeddingLen { got, want } => {
                write!(f, "embedding length {got} does not match declared d={want}")
            }
            Violation::EmbeddingNotFinite { index } => {
                write!(f, "embedding entry {index} is not finite")
            }
            Violation::ProbsLen { got, want } => {
                write!(f, "probs length {got} does not match declared C={want}")
            }
            Violation::ProbEntryOutOfRange { index, value } => {
                write!(f, "probs entry {index} = {value} outside [0, 1]")
            }
            Violation::ProbsNotNormalized { sum } => {
                write!(f, "probs not normalized: sum = {sum}")
            }
            Violation::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} outside [0, {}]", classes - 1)
            }
            Violation::AudioRowLen { row, got, want } => {
                write!(f, "audio row {row} has length {got}, expected d_A={want}")
            }
            Violation::AudioEmpty => write!(f, "audio present but has zero rows"),
        }
    }
}

/// Declared corpus dimensions: embedding length `d`, class count `C`, and
/// the audio row width `d_A` when audio sequences are present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub embedding: usize,
    pub classes: usize,
    pub audio: Option<usize>,
}

/// One corpus item: latent embedding `h`, model probability vector `p`,
/// optional ordinal label, optional precomputed audio sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub embedding: Vec<f64>,
    pub probs: Vec<f64>,
    #[serde(default)]
    pub label: Option<usize>,
    #[serde(default)]
    pub audio: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub tags: Option<BTreeMap<String, String>>,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>, embedding: Vec<f64>, probs: Vec<f64>) -> Self {
        SampleRecord { id: id.into(), embedding, probs, label: None, audio: None, tags: None }
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    /// Dims implied by this record alone, used to infer corpus dims from the
    /// first record.
    fn implied_dims(&self) -> Dims {
        Dims {
            embedding: self.embedding.len(),
            classes: self.probs.len(),
            audio: self.audio.as_ref().and_then(|rows| rows.first()).map(|r| r.len()),
        }
    }
}

/// Check a record against declared dims, returning every violation found.
pub fn validate_record(record: &SampleRecord, dims: &Dims) -> Vec<Violation> {
    let mut out = Vec::new();
    if record.id.is_empty() {
        out.push(Violation::EmptyId);
    }
    if record.embedding.len() != dims.embedding {
        out.push(Violation::EmbeddingLen { got: record.embedding.len(), want: dims.embedding });
    }
    for (i, v) in record.embedding.iter().enumerate() {
        if !v.is_finite() {
            out.push(Violation::EmbeddingNotFinite { index: i });
        }
    }
    if record.probs.len() != dims.classes {
        out.push(Violation::ProbsLen { got: record.probs.len(), want: dims.classes });
    }
    let mut sum = 0.0;
    for (i, &p) in record.probs.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            out.push(Violation::ProbEntryOutOfRange { index: i, value: p });
        }
        sum += p;
    }
    if !record.probs.is_empty() && (sum - 1.0).abs() > PROB_TOLERANCE {
        out.push(Violation::ProbsNotNormalized { sum });
    }
    if let Some(label) = record.label {
        if label >= dims.classes {
            out.push(Violation::LabelOutOfRange { label, classes: dims.classes });
        }
    }
    if let Some(rows) = &record.audio {
        if rows.is_empty() {
            out.push(Violation::AudioEmpty);
        }
        // A record carrying audio in a corpus with no declared audio dim is a
        // mismatch against the first record's shape.
        let want = dims.audio.unwrap_or(0);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != want {
                out.push(Violation::AudioRowLen { row: r, got: row.len(), want });
            }
        }
    }
    out
}

/// An immutable, validated, ordered collection of records with a unique-id
/// index. Safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    dims: Dims,
    records: Vec<SampleRecord>,
    index: HashMap<String, usize>,
}

impl SampleSet {
    /// Build a set, inferring dims from the first record and enforcing them
    /// on all others.
    pub fn new(records: Vec<SampleRecord>) -> Result<Self, DataError> {
        let first = records.first().ok_or(DataError::EmptyCorpus)?;
        Self::with_dims(first.implied_dims(), records)
    }

    /// Build a set against explicitly declared dims; an empty record list is
    /// allowed here.
    pub fn with_dims(dims: Dims, records: Vec<SampleRecord>) -> Result<Self, DataError> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, record) in records.iter().enumerate() {
            let violations = validate_record(record, &dims);
            if !violations.is_empty() {
                return Err(DataError::InvalidRecord { id: record.id.clone(), violations });
            }
            if index.insert(record.id.clone(), i).is_some() {
                return Err(DataError::DuplicateId { id: record.id.clone() });
            }
        }
        Ok(SampleSet { dims, records, index })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Embedding lookup that errors on unknown ids, for resolving batch and
    /// seed ids.
    pub fn embedding_of(&self, id: &str) -> Result<&[f64], DataError> {
        self.get(id)
            .map(|r| r.embedding.as_slice())
            .ok_or_else(|| DataError::UnknownId { id: id.to_string() })
    }

    pub fn iter(&self) -> std::slice::Iter<'_, SampleRecord> {
        self.records.iter()
    }

    /// A new set with the same dims from a subset / transformation of
    /// records (order preserved, full revalidation applied).
    pub fn rebuild(&self, records: Vec<SampleRecord>) -> Result<Self, DataError> {
        Self::with_dims(self.dims, records)
    }
}

/// Corpus file format selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Jsonl,
    Packed,
}

/// Load a corpus. For `Packed`, `path` is the manifest; the data file is
/// resolved relative to it.
pub fn load_samples(path: &Path, format: Format) -> Result<SampleSet, DataError> {
    match format {
        Format::Jsonl => load_jsonl(path),
        Format::Packed => load_packed(path),
    }
}

/// Write a corpus. For `Packed`, `path` is the manifest; the data file is
/// written next to it with the same stem and a `.bin` suffix.
pub fn write_samples(set: &SampleSet, path: &Path, format: Format) -> Result<(), DataError> {
    match format {
        Format::Jsonl => write_jsonl(set, path),
        Format::Packed => write_packed(set, path),
    }
}

fn load_jsonl(path: &Path) -> Result<SampleSet, DataError> {
    let text = fs::read_to_string(path)?;
    let lines: Vec<(usize, &str)> =
        text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).collect();
    // Parsing is parallel across lines; order is preserved by indexed collect,
    // so the result is identical to the sequential path.
    let records = lines
        .par_iter()
        .map(|(n, line)| {
            serde_json::from_str::<SampleRecord>(line)
                .map_err(|e| DataError::MalformedLine { line: n + 1, message: e.to_string() })
        })
        .collect::<Result<Vec<_>, _>>()?;
    SampleSet::new(records)
}

fn write_jsonl(set: &SampleSet, path: &Path) -> Result<(), DataError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for record in set.records() {
        serde_json::to_writer(&mut out, record)
            .map_err(|e| DataError::Io(std::io::Error::other(e)))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PackedManifest {
    format: String,
    version: u32,
    data_file: String,
    embedding_dim: usize,
    classes: usize,
    audio_dim: Option<usize>,
    count: usize,
    ids: Vec<String>,
    labels: Vec<Option<usize>>,
    audio_rows: Option<Vec<usize>>,
    tags: Vec<Option<BTreeMap<String, String>>>,
}

fn write_packed(set: &SampleSet, manifest_path: &Path) -> Result<(), DataError> {
    let data_name = manifest_path
        .file_stem()
        .map(|s| format!("{}.bin", s.to_string_lossy()))
        .unwrap_or_else(|| "data.bin".to_string());
    let dims = set.dims();
    let manifest = PackedManifest {
        format: "lsb-packed".to_string(),
        version: 1,
        data_file: data_name.clone(),
        embedding_dim: dims.embedding,
        classes: dims.classes,
        audio_dim: dims.audio,
        count: set.len(),
        ids: set.iter().map(|r| r.id.clone()).collect(),
        labels: set.iter().map(|r| r.label).collect(),
        audio_rows: if dims.audio.is_some() {
            Some(set.iter().map(|r| r.audio.as_ref().map_or(0, |a| a.len())).collect())
        } else {
            None
        },
        tags: set.iter().map(|r| r.tags.clone()).collect(),
    };
    let mut data = BufWriter::new(fs::File::create(manifest_path.with_file_name(&data_name))?);
    for record in set.records() {
        for &v in &record.embedding {
            data.write_all(&(v as f32).to_le_bytes())?;
        }
        for &v in &record.probs {
            data.write_all(&(v as f32).to_le_bytes())?;
        }
        if let Some(rows) = &record.audio {
            for row in rows {
                for &v in row {
                    data.write_all(&(v as f32).to_le_bytes())?;
                }
            }
        }
    }
    data.flush()?;
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DataError::Io(std::io::Error::other(e)))?;
    fs::write(manifest_path, text)?;
    Ok(())
}

fn load_packed(manifest_path: &Path) -> Result<SampleSet, DataError> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: PackedManifest =
        serde_json::from_str(&text).map_err(|e| DataError::BadManifest(e.to_string()))?;
    if manifest.format != "lsb-packed" || manifest.version != 1 {
        return Err(DataError::BadManifest(format!(
            "unsupported format {:?} version {}",
            manifest.format, manifest.version
        )));
    }
    if manifest.ids.len() != manifest.count
        || manifest.labels.len() != manifest.count
        || manifest.tags.len() != manifest.count
        || manifest.audio_rows.as_ref().is_some_and(|a| a.len() != manifest.count)
    {
        return Err(DataError::BadManifest("table lengths disagree with count".into()));
    }
    let data_path = manifest_path.with_file_name(&manifest.data_file);
    let bytes = fs::read(&data_path)?;
    let per_record_base = manifest.embedding_dim + manifest.classes;
    let audio_dim = manifest.audio_dim.unwrap_or(0);
    let total_floats: usize = (0..manifest.count)
        .map(|i| {
            per_record_base
                + manifest.audio_rows.as_ref().map_or(0, |rows| rows[i]) * audio_dim
        })
        .sum();
    let expected = (total_floats * 4) as u64;
    if (bytes.len() as u64) < expected {
        return Err(DataError::TruncatedData { expected, found: bytes.len() as u64 });
    }
    let mut cursor = 0usize;
    let mut next = |n: usize| -> Vec<f64> {
        let out = bytes[cursor..cursor + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        cursor += 4 * n;
        out
    };
    let mut records = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let embedding = next(manifest.embedding_dim);
        let probs = next(manifest.classes);
        let audio = match &manifest.audio_rows {
            Some(rows) if rows[i] > 0 => {
                Some((0..rows[i]).map(|_| next(audio_dim)).collect::<Vec<_>>())
            }
            _ => None,
        };
        records.push(SampleRecord {
            id: manifest.ids[i].clone(),
            embedding,
            probs,
            label: manifest.labels[i],
            audio,
            tags: manifest.tags[i].clone(),
        });
    }
    SampleSet::with_dims(
        Dims {
            embedding: manifest.embedding_dim,
            classes: manifest.classes,
            audio: manifest.audio_dim,
        },
        records,
    )
}

/// Selection strategy tag carried by batches and batch files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    LeastConfident,
    Margin,
    MaxEntropy,
    Lsb,
    LsbLt,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Strategy::Random => "random",
            Strategy::LeastConfident => "least_confident",
            Strategy::Margin => "margin",
            Strategy::MaxEntropy => "max_entropy",
            Strategy::Lsb => "lsb",
            Strategy::LsbLt => "lsb_lt",
        };
        f.write_str(s)
    }
}

/// One selected id with its diagnostics. `score` is the acquisition score
/// for statistical strategies and the seed distance for LSB batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEntry {
    pub id: String,
    pub score: f64,
    #[serde(default)]
    pub seed_id: Option<String>,
    #[serde(default)]
    pub lookalike_score: Option<f64>,
}

/// An ordered annotation work order for one round and one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionBatch {
    pub round: u32,
    pub strategy: Strategy,
    pub entries: Vec<SelectionEntry>,
}

impl SelectionBatch {
    pub fn new(round: u32, strategy: Strategy, entries: Vec<SelectionEntry>) -> Result<Self, DataError> {
        let mut seen = HashSet::with_capacity(entries.len());
        for entry in &entries {
            if !seen.insert(entry.id.as_str()) {
                return Err(DataError::BadBatch(format!("duplicate id {:?}", entry.id)));
            }
        }
        Ok(SelectionBatch { round, strategy, entries })
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectionLine<'a> {
    id: &'a str,
    strategy: Strategy,
    score: f64,
    seed_id: Option<&'a str>,
    lookalike_score: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectionLineOwned {
    id: String,
    strategy: Strategy,
    score: f64,
    #[serde(default)]
    seed_id: Option<String>,
    #[serde(default)]
    lookalike_score: Option<f64>,
}

/// Write a batch as jsonl with fixed key order
/// (id, strategy, score, seed_id, lookalike_score), one object per line, in
/// batch order.
pub fn write_selection(batch: &SelectionBatch, path: &Path) -> Result<(), DataError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for entry in &batch.entries {
        let line = SelectionLine {
            id: &entry.id,
            strategy: batch.strategy,
            score: entry.score,
            seed_id: entry.seed_id.as_deref(),
            lookalike_score: entry.lookalike_score,
        };
        serde_json::to_writer(&mut out, &line)
            .map_err(|e| DataError::Io(std::io::Error::other(e)))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read a batch file back. The round index is not part of the line schema
/// and comes back as `round`; an empty file yields an empty Random batch.
pub fn load_selection(path: &Path, round: u32) -> Result<SelectionBatch, DataError> {
    let text = fs::read_to_string(path)?;
    let mut strategy = None;
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SelectionLineOwned = serde_json::from_str(line)
            .map_err(|e| DataError::MalformedLine { line: n + 1, message: e.to_string() })?;
        match strategy {
            None => strategy = Some(parsed.strategy),
            Some(s) if s != parsed.strategy => {
                return Err(DataError::MalformedLine {
                    line: n + 1,
                    message: format!("mixed strategies {s} and {}", parsed.strategy),
                })
            }
            _ => {}
        }
        entries.push(SelectionEntry {
            id: parsed.id,
            score: parsed.score,
            seed_id: parsed.seed_id,
            lookalike_score: parsed.lookalike_score,
        });
    }
    SelectionBatch::new(round, strategy.unwrap_or(Strategy::Random), entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, embedding: Vec<f64>, probs: Vec<f64>) -> SampleRecord {
        SampleRecord::new(id, embedding, probs)
    }

    #[test]
    fn smallest_valid_corpus() {
        let set = SampleSet::new(vec![record("a", vec![0.0, 0.0], vec![1.0, 0.0]).with_label(0)])
            .unwrap();
        assert_eq!(set.dims(), Dims { embedding: 2, classes: 2, audio: None });
        assert_eq!(set.len(), 1);
    }

    #[test]
    fn simplex_violation_names_the_id() {
        let err = SampleSet::new(vec![record("a", vec![0.0, 0.0], vec![0.6, 0.6])]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("\"a\""), "{msg}");
        assert!(msg.contains("not normalized"), "{msg}");
    }

    #[test]
    fn validate_reports_all_violations() {
        let dims = Dims { embedding: 2, classes: 4, audio: None };
        let ok = record("x", vec![0.0, 1.0], vec![0.25; 4]);
        assert!(validate_record(&ok, &dims).is_empty());

        let short = record("x", vec![0.0, 1.0], vec![0.5, 0.25, 0.25]);
        assert_eq!(validate_record(&short, &dims).len(), 1);

        // Sum is exactly 1.0, so this trips only the two out-of-range entries.
        let neg = record("x", vec![0.0, 1.0], vec![-0.1, 1.1, 0.0, 0.0]);
        let violations = validate_record(&neg, &dims);
        assert_eq!(violations.len(), 2, "{violations:?}");
        assert!(matches!(violations[0], Violation::ProbEntryOutOfRange { index: 0, .. }));
        assert!(matches!(violations[1], Violation::ProbEntryOutOfRange { index: 1, .. }));
    }

    #[test]
    fn duplicate_id_rejected() {
        let err = SampleSet::new(vec![
            record("a", vec![0.0], vec![1.0]),
            record("a", vec![1.0], vec![1.0]),
        ])
        .unwrap_err();
        assert!(matches!(err, DataError::DuplicateId { .. }));
    }

    #[test]
    fn jsonl_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<SampleRecord> = (0..50)
            .map(|i| {
                let mut r = record(
                    &format!("r{i:03}"),
                    vec![i as f64 * 0.125, -1.5, 0.033],
                    vec![0.5, 0.25, 0.25],
                );
                if i % 3 == 0 {
                    r = r.with_label(i % 3);
                }
                if i % 7 == 0 {
                    r.tags = Some(BTreeMap::from([("split".into(), "pool".into())]));
                }
                r
            })
            .collect();
        let set = SampleSet::new(records).unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        write_samples(&set, &p1, Format::Jsonl).unwrap();
        let loaded = load_samples(&p1, Format::Jsonl).unwrap();
        assert_eq!(loaded.records(), set.records());
        write_samples(&loaded, &p2, Format::Jsonl).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn packed_round_trip_bit_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<SampleRecord> = (0..20)
            .map(|i| {
                let mut r = record(
                    &format!("p{i:02}"),
                    vec![(i as f32 * 0.1) as f64, (-0.25f32) as f64],
                    vec![(0.75f32) as f64, (0.25f32) as f64],
                );
                r.audio = Some(vec![vec![(0.5f32) as f64; 3]; 2]);
                r
            })
            .collect();
        let set = SampleSet::new(records).unwrap();
        let manifest = dir.path().join("corpus.json");
        write_samples(&set, &manifest, Format::Packed).unwrap();
        let loaded = load_samples(&manifest, Format::Packed).unwrap();
        assert_eq!(loaded.records(), set.records());
        assert_eq!(loaded.dims(), set.dims());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(
            &path,
            "{\"id\":\"a\",\"embedding\":[0.0],\"probs\":[1.0],\"label\":null,\"audio\":null,\"tags\":null}\nnot json\n",
        )
        .unwrap();
        let err = load_samples(&path, Format::Jsonl).unwrap_err();
        match err {
            DataError::MalformedLine { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn selection_write_preserves_order_and_empty_batch_is_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.jsonl");
        let empty = SelectionBatch::new(0, Strategy::Random, vec![]).unwrap();
        write_selection(&empty, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"");

        let batch = SelectionBatch::new(
            1,
            Strategy::MaxEntropy,
            vec![
                SelectionEntry { id: "c".into(), score: 0.3, seed_id: None, lookalike_score: None },
                SelectionEntry { id: "a".into(), score: 0.2, seed_id: None, lookalike_score: None },
                SelectionEntry { id: "b".into(), score: 0.1, seed_id: None, lookalike_score: None },
            ],
        )
        .unwrap();
        write_selection(&batch, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let ids: Vec<&str> =
            text.lines().map(|l| l.split('"').nth(3).unwrap()).collect();
        assert_eq!(ids, vec!["c", "a", "b"]);
    }

    #[test]
    fn selection_write_read_write_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("b1.jsonl");
        let p2 = dir.path().join("b2.jsonl");
        let batch = SelectionBatch::new(
            2,
            Strategy::LsbLt,
            (0..30)
                .map(|i| SelectionEntry {
                    id: format!("id{i}"),
                    score: i as f64 * 0.017,
                    seed_id: if i % 2 == 0 { Some(format!("s{i}")) } else { None },
                    lookalike_score: Some(1.0 / (1.0 + i as f64)),
                })
                .collect(),
        )
        .unwrap();
        write_selection(&batch, &p1).unwrap();
        let loaded = load_selection(&p1, 2).unwrap();
        assert_eq!(loaded, batch);
        write_selection(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }
}
