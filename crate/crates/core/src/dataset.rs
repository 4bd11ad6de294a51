//! On-disk record model: preference datasets in, selections out.
//!
//! Input is line-delimited JSON, one record per line:
//!
//! ```text
//! {"id": "r1", "margins": {"external": 1.25}, "logprobs": {"theta_w": -3.1, "ref_w": -3.4, "theta_l": -2.0, "ref_l": -1.9}, "meta": {"split": "train"}}
//! ```
//!
//! `logprobs` and `meta` are optional. A selection file starts with a
//! `#config=<digest>` line followed by one `{"id": ..., "score": ...}` object
//! per selected record, in selection order.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::margin::{implicit_margin, LogprobBundle};
use crate::select::StrategyKind;

/// Margin source name under which derived implicit-reward margins are stored.
pub const IMPLICIT_SOURCE: &str = "implicit";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub id: String,
    pub margins: BTreeMap<String, f64>,
    #[serde(default, rename = "logprobs", skip_serializing_if = "Option::is_none")]
    pub logprob_bundle: Option<LogprobBundle>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl PreferenceRecord {
    pub fn new(id: impl Into<String>) -> Self {
        PreferenceRecord {
            id: id.into(),
            margins: BTreeMap::new(),
            logprob_bundle: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_margin(mut self, source: impl Into<String>, value: f64) -> Self {
        self.margins.insert(source.into(), value);
        self
    }

    pub fn margin(&self, source: &str) -> Result<f64> {
        self.margins
            .get(source)
            .copied()
            .ok_or_else(|| Error::MissingMargin {
                record_id: self.id.clone(),
                source_name: source.to_string(),
            })
    }

    /// Check the record invariants.
    pub fn validate(&self) -> Result<()> {
        let invalid = |message: String| Error::InvalidRecord {
            id: self.id.clone(),
            message,
        };
        if self.id.is_empty() {
            return Err(invalid("empty id".into()));
        }
        for (source, value) in &self.margins {
            if !value.is_finite() {
                return Err(invalid(format!("margin `{source}` is not finite")));
            }
        }
        if let Some(bundle) = &self.logprob_bundle {
            bundle.validate().map_err(|e| invalid(e.to_string()))?;
        }
        Ok(())
    }

    /// Fill the `implicit` margin from the log-probability bundle, unless the
    /// record already carries one.
    pub fn derive_implicit(&mut self) -> Result<()> {
        if self.margins.contains_key(IMPLICIT_SOURCE) {
            return Ok(());
        }
        if let Some(bundle) = &self.logprob_bundle {
            let m = implicit_margin(bundle)?;
            self.margins.insert(IMPLICIT_SOURCE.to_string(), m);
        }
        Ok(())
    }
}

/// How the loader treats malformed lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strictness {
    /// Any malformed or invalid line aborts the load.
    #[default]
    Strict,
    /// Malformed or invalid lines are skipped and counted.
    Lenient,
}

/// Streaming reader over a JSONL preference dataset.
///
/// Yields validated records in file order. Duplicate ids are always an error.
pub struct RecordReader<R> {
    lines: std::io::Lines<R>,
    path: PathBuf,
    strictness: Strictness,
    line_no: usize,
    seen: HashSet<String>,
    count: usize,
    skipped: usize,
    failed: bool,
}

impl<R: BufRead> RecordReader<R> {
    pub fn new(reader: R, strictness: Strictness) -> Self {
        Self::with_path(reader, strictness, PathBuf::from("<stream>"))
    }

    fn with_path(reader: R, strictness: Strictness, path: PathBuf) -> Self {
        RecordReader {
            lines: reader.lines(),
            path,
            strictness,
            line_no: 0,
            seen: HashSet::new(),
            count: 0,
            skipped: 0,
            failed: false,
        }
    }

    /// Records yielded so far.
    pub fn records_read(&self) -> usize {
        self.count
    }

    /// Lines skipped in lenient mode.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    fn parse_line(&self, line: &str) -> Result<PreferenceRecord> {
        let record: PreferenceRecord =
            serde_json::from_str(line).map_err(|e| Error::Malformed {
                line: self.line_no,
                message: e.to_string(),
            })?;
        record.validate().map_err(|e| Error::Malformed {
            line: self.line_no,
            message: e.to_string(),
        })?;
        Ok(record)
    }
}

impl<R: BufRead> Iterator for RecordReader<R> {
    type Item = Result<PreferenceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => {
                    self.failed = true;
                    return Some(Err(Error::io(&self.path, e)));
                }
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            match self.parse_line(&line) {
                Ok(record) => {
                    if !self.seen.insert(record.id.clone()) {
                        self.failed = true;
                        return Some(Err(Error::DuplicateId {
                            id: record.id,
                            line: self.line_no,
                        }));
                    }
                    self.count += 1;
                    return Some(Ok(record));
                }
                Err(e) => match self.strictness {
                    Strictness::Strict => {
                        self.failed = true;
                        return Some(Err(e));
                    }
                    Strictness::Lenient => self.skipped += 1,
                },
            }
        }
    }
}

/// Open a JSONL dataset for streaming.
pub fn load_dataset(
    path: impl AsRef<Path>,
    strictness: Strictness,
) -> Result<RecordReader<BufReader<File>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(RecordReader::with_path(
        BufReader::new(file),
        strictness,
        path.to_path_buf(),
    ))
}

/// Load a whole dataset into memory.
pub fn read_dataset(
    path: impl AsRef<Path>,
    strictness: Strictness,
) -> Result<Vec<PreferenceRecord>> {
    load_dataset(path, strictness)?.collect()
}

/// Write records as JSONL.
pub fn write_dataset<'a, I>(records: I, path: impl AsRef<Path>) -> Result<()>
where
    I: IntoIterator<Item = &'a PreferenceRecord>,
{
    write_jsonl(records, path)
}

/// Write any serializable items as JSONL.
pub fn write_jsonl<'a, T, I>(items: I, path: impl AsRef<Path>) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| Error::io(path, e.into()))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Read every nonblank line of a JSONL file as `T`.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Result of a selection strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutput {
    pub strategy: StrategyKind,
    /// Selected ids in selection order; nonincreasing in `scores`.
    pub selected_ids: Vec<String>,
    pub scores: BTreeMap<String, f64>,
    /// `<strategy>:<hex>` fingerprint of every parameter that produced the
    /// selection.
    pub config_digest: String,
}

impl SelectionOutput {
    pub fn len(&self) -> usize {
        self.selected_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected_ids.is_empty()
    }

    pub fn score(&self, id: &str) -> Option<f64> {
        self.scores.get(id).copied()
    }

    /// Selected `(id, score)` pairs in order.
    pub fn ranked(&self) -> impl Iterator<Item = (&str, f64)> + '_ {
        self.selected_ids
            .iter()
            .map(move |id| (id.as_str(), self.scores[id]))
    }
}

/// Fingerprint of a strategy and its serializable parameters.
pub fn config_digest<T: Serialize>(strategy: StrategyKind, params: &T) -> String {
    let bytes = serde_json::to_vec(params).expect("parameters serialize");
    let hash = Sha256::digest(&bytes);
    let hex: String = hash[..8].iter().map(|b| format!("{b:02x}")).collect();
    format!("{}:{hex}", strategy.as_str())
}

#[derive(Serialize, Deserialize)]
struct SelectionLine {
    id: String,
    score: f64,
}

const CONFIG_PREFIX: &str = "#config=";

/// Persist a selection.
pub fn write_selection(output: &SelectionOutput, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e: std::io::Error| Error::io(path, e);
    let file = File::create(path).map_err(io)?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{CONFIG_PREFIX}{}", output.config_digest).map_err(io)?;
    for (id, score) in output.ranked() {
        let line = SelectionLine {
            id: id.to_string(),
            score,
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| io(e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Read a selection written by [`write_selection`].
pub fn read_selection(path: impl AsRef<Path>) -> Result<SelectionOutput> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let malformed = |line: usize, message: String| Error::Malformed { line, message };

    let header = lines
        .next()
        .ok_or_else(|| malformed(1, "missing config header".into()))?
        .map_err(|e| Error::io(path, e))?;
    let digest = header
        .strip_prefix(CONFIG_PREFIX)
        .ok_or_else(|| malformed(1, format!("expected `{CONFIG_PREFIX}` header")))?
        .to_string();
    let strategy = digest
        .split(':')
        .next()
        .and_then(StrategyKind::parse)
        .ok_or_else(|| malformed(1, format!("unknown strategy in digest `{digest}`")))?;

    let mut selected_ids = Vec::new();
    let mut scores = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SelectionLine =
            serde_json::from_str(&line).map_err(|e| malformed(line_no, e.to_string()))?;
        if scores.insert(parsed.id.clone(), parsed.score).is_some() {
            return Err(Error::DuplicateId {
                id: parsed.id,
                line: line_no,
            });
        }
        selected_ids.push(parsed.id);
    }
    Ok(SelectionOutput {
        strategy,
        selected_ids,
        scores,
        config_digest: digest,
    })
}
