//! Readers and writers for every on-disk artifact.
//!
//! * samples / predictions / pairs: JSON Lines, one object per line.
//! * embeddings: `CXEB` binary matrix plus a newline-delimited id file.
//!   Layout: magic `43 58 45 42`, version byte `01`, row count (u32 LE),
//!   dim (u32 LE), then `count * dim` f32 LE values in row-major order.
//! * rejection pools: one JSON document.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::confidence::TriageClass;
use crate::types::{
    PairViolation, PredictionRecord, PredictionViolation, PreferencePair, RawSample, Sample,
    SampleSet, Violation,
};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"CXEB";
pub const EMBEDDING_VERSION: u8 = 0x01;
const HEADER_LEN: usize = 4 + 1 + 4 + 4;

#[derive(Debug, thiserror::Error)]
pub enum InterchangeError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: malformed json: {message}")]
    MalformedJson {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: invalid sample: {}", join_codes(.codes))]
    InvalidSample {
        path: PathBuf,
        line: usize,
        codes: Vec<Violation>,
    },
    #[error("{path}:{line}: positive token log-prob")]
    PositiveLogprob { path: PathBuf, line: usize },
    #[error("{path}:{line}: non-finite token log-prob")]
    NonFiniteLogprob { path: PathBuf, line: usize },
    #[error("{path}:{line}: empty token log-prob list")]
    EmptyTokenList { path: PathBuf, line: usize },
    #[error("{path}:{line}: duplicate prediction for sample {sample_id:?}")]
    DuplicatePrediction {
        path: PathBuf,
        line: usize,
        sample_id: String,
    },
    #[error("{path}: bad magic bytes")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported version {found}")]
    VersionMismatch { path: PathBuf, found: u8 },
    #[error("{path}: header declares {header} rows but id file lists {ids}")]
    CountMismatch {
        path: PathBuf,
        header: usize,
        ids: usize,
    },
    #[error("{path}: row {row} is the zero vector")]
    ZeroVectorRow { path: PathBuf, row: usize },
    #[error("{path}: row {row} holds a non-finite value")]
    NonFiniteValue { path: PathBuf, row: usize },
    #[error("{path}: payload truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {extra} trailing bytes after payload")]
    TrailingBytes { path: PathBuf, extra: usize },
    #[error("{path}: zero dimension with {rows} rows")]
    ZeroDim { path: PathBuf, rows: usize },
    #[error("{path}: duplicate id {id:?}")]
    DuplicateId { path: PathBuf, id: String },
    #[error("pair {index} violates invariant: {violation}")]
    PairInvariant {
        index: usize,
        violation: PairViolation,
    },
    #[error("embedding dims disagree: {0}")]
    DimMismatch(String),
    #[error("{path}: malformed pools: {message}")]
    MalformedPools { path: PathBuf, message: String },
    #[error("{path}: {pool} group {group} has fewer than two terms")]
    GroupTooSmall {
        path: PathBuf,
        pool: &'static str,
        group: usize,
    },
    #[error("{path}: {pool} group {group} repeats term {term:?}")]
    DuplicateTerm {
        path: PathBuf,
        pool: &'static str,
        group: usize,
        term: String,
    },
    #[error("{path}: {map} opposites are not an involution at {term:?}")]
    NonInvolutiveOpposites {
        path: PathBuf,
        map: &'static str,
        term: String,
    },
}

fn join_codes(codes: &[Violation]) -> String {
    codes.iter().map(|c| c.code()).collect::<Vec<_>>().join(", ")
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> InterchangeError + '_ {
    move |source| InterchangeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Non-blank lines with their 1-based line numbers.
fn jsonl_lines(path: &Path) -> Result<Vec<(usize, String)>, InterchangeError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn parse_line<T: for<'de> Deserialize<'de>>(
    path: &Path,
    line: usize,
    text: &str,
) -> Result<T, InterchangeError> {
    serde_json::from_str(text).map_err(|e| InterchangeError::MalformedJson {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    })
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), InterchangeError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| io_err(path)(e.into()))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads sample JSONL in file order, validating every record.
pub fn read_samples(path: &Path) -> Result<SampleSet, InterchangeError> {
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    for (line, text) in jsonl_lines(path)? {
        let raw: RawSample = parse_line(path, line, &text)?;
        let duplicate = !seen.insert(raw.id.clone());
        let sample = match raw.into_sample() {
            Ok(s) if !duplicate => s,
            Ok(_) => {
                return Err(InterchangeError::InvalidSample {
                    path: path.to_path_buf(),
                    line,
                    codes: vec![Violation::DuplicateId],
                })
            }
            Err(mut codes) => {
                if duplicate {
                    codes.push(Violation::DuplicateId);
                }
                return Err(InterchangeError::InvalidSample {
                    path: path.to_path_buf(),
                    line,
                    codes,
                });
            }
        };
        samples.push(sample);
    }
    Ok(SampleSet::new(samples).expect("ids checked while reading"))
}

pub fn write_samples(samples: &[Sample], path: &Path) -> Result<(), InterchangeError> {
    write_jsonl(path, samples)
}

/// Reads prediction JSONL, enforcing the log-prob invariants and at most one
/// record per sample.
pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, InterchangeError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, text) in jsonl_lines(path)? {
        let record: PredictionRecord = parse_line(path, line, &text)?;
        let p = path.to_path_buf();
        match record.check() {
            Ok(()) => {}
            Err(PredictionViolation::EmptyTokenList) => {
                return Err(InterchangeError::EmptyTokenList { path: p, line })
            }
            Err(PredictionViolation::PositiveLogprob) => {
                return Err(InterchangeError::PositiveLogprob { path: p, line })
            }
            Err(PredictionViolation::NonFiniteLogprob) => {
                return Err(InterchangeError::NonFiniteLogprob { path: p, line })
            }
        }
        if !seen.insert(record.sample_id.clone()) {
            return Err(InterchangeError::DuplicatePrediction {
                path: p,
                line,
                sample_id: record.sample_id,
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn write_predictions(records: &[PredictionRecord], path: &Path) -> Result<(), InterchangeError> {
    write_jsonl(path, records)
}

/// Writes pairs as JSONL with a fixed key order. Every pair is checked first;
/// nothing is written if any pair is invalid.
pub fn write_pairs(pairs: &[PreferencePair], path: &Path) -> Result<(), InterchangeError> {
    for (index, pair) in pairs.iter().enumerate() {
        pair.check()
            .map_err(|violation| InterchangeError::PairInvariant { index, violation })?;
    }
    write_jsonl(path, pairs)
}

pub fn read_pairs(path: &Path) -> Result<Vec<PreferencePair>, InterchangeError> {
    jsonl_lines(path)?
        .into_iter()
        .map(|(line, text)| parse_line(path, line, &text))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Question,
    Rationale,
    Image,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Question, Modality::Rationale, Modality::Image];

    /// File stem inside an embeddings directory.
    pub fn stem(self) -> &'static str {
        match self {
            Modality::Question => "q",
            Modality::Rationale => "t",
            Modality::Image => "v",
        }
    }
}

/// Id-indexed dense f32 matrix for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    modality: Modality,
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingSet {
    /// Builds a set from rows, enforcing unique ids, a shared dimension and
    /// non-zero finite rows.
    pub fn from_rows(
        modality: Modality,
        rows: Vec<(String, Vec<f32>)>,
    ) -> Result<Self, InterchangeError> {
        let dim = rows.first().map_or(0, |r| r.1.len());
        let mut ids = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (id, v) in rows {
            if v.len() != dim {
                return Err(InterchangeError::DimMismatch(format!(
                    "row {id:?} has {} values, expected {dim}",
                    v.len()
                )));
            }
            ids.push(id);
            data.extend(v);
        }
        Self::new(modality, ids, dim, data, Path::new("<memory>"))
    }

    fn new(
        modality: Modality,
        ids: Vec<String>,
        dim: usize,
        data: Vec<f32>,
        path: &Path,
    ) -> Result<Self, InterchangeError> {
        if dim == 0 && !ids.is_empty() {
            return Err(InterchangeError::ZeroDim {
                path: path.to_path_buf(),
                rows: ids.len(),
            });
        }
        debug_assert_eq!(data.len(), ids.len() * dim);
        let mut index = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), row).is_some() {
                return Err(InterchangeError::DuplicateId {
                    path: path.to_path_buf(),
                    id: id.clone(),
                });
            }
        }
        for (row, values) in data.chunks(dim.max(1)).enumerate() {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(InterchangeError::NonFiniteValue {
                    path: path.to_path_buf(),
                    row,
                });
            }
            if values.iter().all(|&v| v == 0.0) {
                return Err(InterchangeError::ZeroVectorRow {
                    path: path.to_path_buf(),
                    row,
                });
            }
        }
        Ok(EmbeddingSet {
            modality,
            ids,
            dim,
            data,
            index,
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.row_index(id).map(|i| self.row(i))
    }

    /// Serializes the binary payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(&EMBEDDING_MAGIC);
        out.push(EMBEDDING_VERSION);
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// Decodes a binary payload plus its id list.
pub fn decode_embeddings(
    bytes: &[u8],
    ids: Vec<String>,
    modality: Modality,
    path: &Path,
) -> Result<EmbeddingSet, InterchangeError> {
    let p = || path.to_path_buf();
    if bytes.len() < 4 || bytes[..4] != EMBEDDING_MAGIC {
        return Err(InterchangeError::BadMagic { path: p() });
    }
    if bytes.len() < 5 {
        return Err(InterchangeError::TruncatedPayload {
            path: p(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if bytes[4] != EMBEDDING_VERSION {
        return Err(InterchangeError::VersionMismatch {
            path: p(),
            found: bytes[4],
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(InterchangeError::TruncatedPayload {
            path: p(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let expected = HEADER_LEN + count * dim * 4;
    if bytes.len() < expected {
        return Err(InterchangeError::TruncatedPayload {
            path: p(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(InterchangeError::TrailingBytes {
            path: p(),
            extra: bytes.len() - expected,
        });
    }
    if ids.len() != count {
        return Err(InterchangeError::CountMismatch {
            path: p(),
            header: count,
            ids: ids.len(),
        });
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingSet::new(modality, ids, dim, data, path)
}

pub fn read_embeddings(
    bin_path: &Path,
    ids_path: &Path,
    modality: Modality,
) -> Result<EmbeddingSet, InterchangeError> {
    let bytes = std::fs::read(bin_path).map_err(io_err(bin_path))?;
    let ids_text = std::fs::read_to_string(ids_path).map_err(io_err(ids_path))?;
    let ids: Vec<String> = ids_text.lines().map(str::to_string).collect();
    decode_embeddings(&bytes, ids, modality, bin_path)
}

pub fn write_embeddings(
    set: &EmbeddingSet,
    bin_path: &Path,
    ids_path: &Path,
) -> Result<(), InterchangeError> {
    std::fs::write(bin_path, set.to_bytes()).map_err(io_err(bin_path))?;
    let mut ids = String::new();
    for id in set.ids() {
        ids.push_str(id);
        ids.push('\n');
    }
    std::fs::write(ids_path, ids).map_err(io_err(ids_path))
}

/// Paths of one modality's files inside an embeddings directory.
pub fn embedding_paths(dir: &Path, modality: Modality) -> (PathBuf, PathBuf) {
    let stem = modality.stem();
    (dir.join(format!("{stem}.bin")), dir.join(format!("{stem}.ids")))
}

/// Question, rationale and image embeddings for one dataset.
#[derive(Debug, Clone)]
pub struct EmbeddingBundle {
    pub question: EmbeddingSet,
    pub rationale: EmbeddingSet,
    pub image: EmbeddingSet,
}

impl EmbeddingBundle {
    pub fn read_dir(dir: &Path) -> Result<Self, InterchangeError> {
        let load = |m| {
            let (bin, ids) = embedding_paths(dir, m);
            read_embeddings(&bin, &ids, m)
        };
        Ok(EmbeddingBundle {
            question: load(Modality::Question)?,
            rationale: load(Modality::Rationale)?,
            image: load(Modality::Image)?,
        })
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), InterchangeError> {
        for set in [&self.question, &self.rationale, &self.image] {
            let (bin, ids) = embedding_paths(dir, set.modality());
            write_embeddings(set, &bin, &ids)?;
        }
        Ok(())
    }

    pub fn get(&self, modality: Modality) -> &EmbeddingSet {
        match modality {
            Modality::Question => &self.question,
            Modality::Rationale => &self.rationale,
            Modality::Image => &self.image,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Opposites {
    #[serde(default)]
    pub gender: BTreeMap<String, String>,
    #[serde(default)]
    pub plane: BTreeMap<String, String>,
}

/// Groups of mutually counterfactual terms, plus opposite maps for gender
/// and plane answers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RejectionPools {
    #[serde(default)]
    pub anatomy: Vec<Vec<String>>,
    #[serde(default)]
    pub abnormality: Vec<Vec<String>>,
    #[serde(default)]
    pub severity: Vec<Vec<String>>,
    #[serde(default)]
    pub opposites: Opposites,
}

const DEFAULT_POOLS: &str = include_str!("default_pools.json");

impl RejectionPools {
    /// Pools shipped with the crate.
    pub fn builtin() -> Self {
        let pools: RejectionPools =
            serde_json::from_str(DEFAULT_POOLS).expect("built-in pools parse");
        pools
            .validate(Path::new("<builtin>"))
            .expect("built-in pools are valid");
        pools
    }

    pub fn validate(&self, path: &Path) -> Result<(), InterchangeError> {
        use crate::text::normalize;
        for (pool, groups) in [
            ("anatomy", &self.anatomy),
            ("abnormality", &self.abnormality),
            ("severity", &self.severity),
        ] {
            for (group, terms) in groups.iter().enumerate() {
                if terms.len() < 2 {
                    return Err(InterchangeError::GroupTooSmall {
                        path: path.to_path_buf(),
                        pool,
                        group,
                    });
                }
                let mut seen = HashSet::new();
                for term in terms {
                    let n = normalize(term);
                    if n.is_empty() || !seen.insert(n) {
                        return Err(InterchangeError::DuplicateTerm {
                            path: path.to_path_buf(),
                            pool,
                            group,
                            term: term.clone(),
                        });
                    }
                }
            }
        }
        for (map, opposites) in [("gender", &self.opposites.gender), ("plane", &self.opposites.plane)] {
            let normalized: HashMap<String, String> = opposites
                .iter()
                .map(|(k, v)| (normalize(k), normalize(v)))
                .collect();
            for (k, v) in &normalized {
                if k == v || normalized.get(v) != Some(k) {
                    return Err(InterchangeError::NonInvolutiveOpposites {
                        path: path.to_path_buf(),
                        map,
                        term: k.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn groups(&self, pool: PoolKind) -> &[Vec<String>] {
        match pool {
            PoolKind::Anatomy => &self.anatomy,
            PoolKind::Abnormality => &self.abnormality,
            PoolKind::Severity => &self.severity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Anatomy,
    Abnormality,
    Severity,
}

pub fn parse_pools(text: &str, path: &Path) -> Result<RejectionPools, InterchangeError> {
    let pools: RejectionPools =
        serde_json::from_str(text).map_err(|e| InterchangeError::MalformedPools {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    pools.validate(path)?;
    Ok(pools)
}

pub fn read_pools(path: &Path) -> Result<RejectionPools, InterchangeError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_pools(&text, path)
}

/// One line of the neighbor dump: `{"query_id": .., "neighbors": [[id, score], ..]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborRecord {
    pub query_id: String,
    pub neighbors: Vec<(String, f64)>,
}

pub fn write_neighbors(records: &[NeighborRecord], path: &Path) -> Result<(), InterchangeError> {
    write_jsonl(path, records)
}

pub fn read_neighbors(path: &Path) -> Result<Vec<NeighborRecord>, InterchangeError> {
    jsonl_lines(path)?
        .into_iter()
        .map(|(line, text)| parse_line(path, line, &text))
        .collect()
}

/// One line of a triage dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageRecord {
    pub sample_id: String,
    pub class: TriageClass,
    pub logprob: f64,
}

pub fn write_triage(records: &[TriageRecord], path: &Path) -> Result<(), InterchangeError> {
    write_jsonl(path, records)
}

pub fn read_triage(path: &Path) -> Result<Vec<TriageRecord>, InterchangeError> {
    jsonl_lines(path)?
        .into_iter()
        .map(|(line, text)| parse_line(path, line, &text))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_line(id: &str) -> String {
        format!(
            r#"{{"id":"{id}","image_ids":["img"],"question":"Is there pneumonia?","answer":["yes"],"explanation":"Opacity noted.","question_type":"presence","answer_type":"closed","split":"train"}}"#
        )
    }

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(text.as_bytes()).unwrap();
        p
    }

    #[test]
    fn empty_sample_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "s.jsonl", "");
        assert!(read_samples(&p).unwrap().is_empty());
    }

    #[test]
    fn samples_keep_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!("{}\n{}\n", sample_line("b"), sample_line("a"));
        let p = write(dir.path(), "s.jsonl", &text);
        let set = read_samples(&p).unwrap();
        assert_eq!(set.ids().collect::<Vec<_>>(), vec!["b", "a"]);
    }

    #[test]
    fn duplicate_id_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let lines: Vec<String> = ["a", "b", "c", "d", "b"].iter().map(|i| sample_line(i)).collect();
        let p = write(dir.path(), "s.jsonl", &lines.join("\n"));
        match read_samples(&p) {
            Err(InterchangeError::InvalidSample { line, codes, .. }) => {
                assert_eq!(line, 5);
                assert_eq!(codes, vec![Violation::DuplicateId]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "s.jsonl", &format!("{}\n{{oops\n", sample_line("a")));
        assert!(matches!(
            read_samples(&p),
            Err(InterchangeError::MalformedJson { line: 2, .. })
        ));
    }

    #[test]
    fn canonical_sample_line_round_trips_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let line = sample_line("a");
        let p = write(dir.path(), "s.jsonl", &format!("{line}\n"));
        let set = read_samples(&p).unwrap();
        let out = dir.path().join("o.jsonl");
        write_samples(set.as_slice(), &out).unwrap();
        assert_eq!(std::fs::read_to_string(out).unwrap(), format!("{line}\n"));
    }

    fn pred_line(lps: &str) -> String {
        format!(
            r#"{{"sample_id":"a","predicted_answer":"yes","explanation":"x","answer_token_logprobs":{lps},"model_id":"m"}}"#
        )
    }

    #[test]
    fn prediction_logprob_checks() {
        let dir = tempfile::tempdir().unwrap();
        let ok = write(dir.path(), "ok.jsonl", &pred_line("[-0.3]"));
        assert_eq!(read_predictions(&ok).unwrap().len(), 1);
        let pos = write(dir.path(), "pos.jsonl", &pred_line("[0.1]"));
        assert!(matches!(
            read_predictions(&pos),
            Err(InterchangeError::PositiveLogprob { line: 1, .. })
        ));
        let empty = write(dir.path(), "empty.jsonl", &pred_line("[]"));
        assert!(matches!(
            read_predictions(&empty),
            Err(InterchangeError::EmptyTokenList { line: 1, .. })
        ));
    }

    fn header(count: u32, dim: u32) -> Vec<u8> {
        let mut b = EMBEDDING_MAGIC.to_vec();
        b.push(EMBEDDING_VERSION);
        b.extend_from_slice(&count.to_le_bytes());
        b.extend_from_slice(&dim.to_le_bytes());
        b
    }

    #[test]
    fn empty_embedding_set() {
        let set = decode_embeddings(&header(0, 4), vec![], Modality::Question, Path::new("x")).unwrap();
        assert!(set.is_empty());
        assert_eq!(set.dim(), 4);
    }

    #[test]
    fn single_row_is_exact() {
        let mut bytes = header(1, 4);
        for v in [1.0f32, 0.0, 0.0, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let set = decode_embeddings(&bytes, vec!["a".into()], Modality::Image, Path::new("x")).unwrap();
        assert_eq!(set.get("a").unwrap(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(set.to_bytes(), bytes);
    }

    #[test]
    fn missing_row_is_truncated() {
        let mut bytes = header(3, 2);
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let ids = vec!["a".into(), "b".into(), "c".into()];
        match decode_embeddings(&bytes, ids, Modality::Question, Path::new("x")) {
            Err(InterchangeError::TruncatedPayload { expected, found, .. }) => {
                assert_eq!(expected - found, 8);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_errors() {
        let p = Path::new("x");
        assert!(matches!(
            decode_embeddings(b"NOPE\x01", vec![], Modality::Question, p),
            Err(InterchangeError::BadMagic { .. })
        ));
        let mut b = header(0, 4);
        b[4] = 2;
        assert!(matches!(
            decode_embeddings(&b, vec![], Modality::Question, p),
            Err(InterchangeError::VersionMismatch { found: 2, .. })
        ));
        assert!(matches!(
            decode_embeddings(&header(0, 4), vec!["a".into()], Modality::Question, p),
            Err(InterchangeError::CountMismatch { header: 0, ids: 1, .. })
        ));
        let mut zero = header(1, 2);
        zero.extend_from_slice(&[0u8; 8]);
        assert!(matches!(
            decode_embeddings(&zero, vec!["a".into()], Modality::Question, p),
            Err(InterchangeError::ZeroVectorRow { row: 0, .. })
        ));
    }

    #[test]
    fn embedding_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = EmbeddingSet::from_rows(
            Modality::Rationale,
            vec![("x".into(), vec![0.25, -1.5]), ("y".into(), vec![3.0, 1e-7])],
        )
        .unwrap();
        let (bin, ids) = embedding_paths(dir.path(), Modality::Rationale);
        write_embeddings(&set, &bin, &ids).unwrap();
        let back = read_embeddings(&bin, &ids, Modality::Rationale).unwrap();
        assert_eq!(back, set);
        assert_eq!(std::fs::read(&bin).unwrap(), set.to_bytes());
    }

    #[test]
    fn pools_from_examples_are_accepted() {
        let text = r#"{"anatomy": [["left lung opacity", "right lung opacity"]],
                       "opposites": {"gender": {"female": "male", "male": "female"}}}"#;
        let pools = parse_pools(text, Path::new("p")).unwrap();
        assert_eq!(pools.anatomy.len(), 1);
    }

    #[test]
    fn pool_errors() {
        let p = Path::new("p");
        assert!(matches!(
            parse_pools(r#"{"opposites": {"plane": {"ap view": "pa view"}}}"#, p),
            Err(InterchangeError::NonInvolutiveOpposites { map: "plane", .. })
        ));
        assert!(matches!(
            parse_pools(r#"{"severity": [["mild"]]}"#, p),
            Err(InterchangeError::GroupTooSmall { pool: "severity", group: 0, .. })
        ));
        assert!(matches!(
            parse_pools(r#"{"abnormality": [["Pneumonia", "pneumonia "]]}"#, p),
            Err(InterchangeError::DuplicateTerm { .. })
        ));
        assert!(matches!(
            parse_pools(r#"{"anatomy": [["a", "b"]], "sizes": []}"#, p),
            Err(InterchangeError::MalformedPools { .. })
        ));
    }

    #[test]
    fn builtin_pools_are_valid() {
        let pools = RejectionPools::builtin();
        assert!(!pools.anatomy.is_empty());
        assert_eq!(pools.opposites.gender.get("female").map(String::as_str), Some("male"));
        assert_eq!(pools.opposites.plane.get("ap view").map(String::as_str), Some("pa view"));
    }
}
