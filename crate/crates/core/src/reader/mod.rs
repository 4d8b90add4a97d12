//! Blinded reader study: assignment, read records, adjudication and the
//! analytics computed from reads.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::findings::{read_findings, FindingKey, READ_FINDINGS};
use crate::matrix::CooccurrenceMatrix;

mod store;
pub use store::{ReaderStore, SessionInfo};

#[derive(Debug, Error)]
pub enum ReaderError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("reads do not join to the manifest: {}", .0.join(", "))]
    Orphans(Vec<String>),
    #[error("no reads")]
    NoReads,
    #[error("{0} reads still await adjudication")]
    PendingAdjudication(usize),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("store: {0}")]
    Store(#[from] rusqlite::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Reader answer for one finding: 0 absent, 1 present, 2 unsure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ReadLabel {
    #[default]
    Absent,
    Present,
    Unsure,
}

impl TryFrom<u8> for ReadLabel {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            0 => Ok(ReadLabel::Absent),
            1 => Ok(ReadLabel::Present),
            2 => Ok(ReadLabel::Unsure),
            other => Err(format!("label {other} is not one of 0, 1, 2")),
        }
    }
}

impl From<ReadLabel> for u8 {
    fn from(l: ReadLabel) -> u8 {
        match l {
            ReadLabel::Absent => 0,
            ReadLabel::Present => 1,
            ReadLabel::Unsure => 2,
        }
    }
}

impl fmt::Display for ReadLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

/// Parses a CSV cell; blank means absent.
pub fn parse_label_cell(cell: &str) -> Result<Option<ReadLabel>, ReaderError> {
    let t = cell.trim();
    if t.is_empty() {
        return Ok(None);
    }
    let v: u8 = t
        .parse()
        .map_err(|_| ReaderError::Validation(format!("label {t:?} is not one of 0, 1, 2")))?;
    ReadLabel::try_from(v).map(Some).map_err(ReaderError::Validation)
}

/// One reader's read of one scan. Labels align with [`READ_FINDINGS`].
/// Flags are `None` until adjudicated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadRecord {
    pub reader_id: String,
    pub output_id: String,
    pub labels: Vec<ReadLabel>,
    pub notes: String,
    pub artificial_flag: Option<bool>,
    pub extra_anomaly_flag: Option<bool>,
}

impl ReadRecord {
    pub fn label(&self, finding: &str) -> Option<ReadLabel> {
        READ_FINDINGS.iter().position(|f| *f == finding).map(|i| self.labels[i])
    }

    pub fn is_adjudicated(&self) -> bool {
        self.artificial_flag.is_some() && self.extra_anomaly_flag.is_some()
    }
}

/// What a reader client submits. Missing findings read as 0.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReadSubmission {
    pub display_id: u32,
    #[serde(default)]
    pub labels: BTreeMap<String, u8>,
    #[serde(default)]
    pub notes: String,
    /// Must be set to overwrite an existing read.
    #[serde(default)]
    pub revision: bool,
}

/// Validates submitted labels into the fixed finding order.
pub fn validate_labels(labels: &BTreeMap<String, u8>) -> Result<Vec<ReadLabel>, ReaderError> {
    let mut out = vec![ReadLabel::Absent; READ_FINDINGS.len()];
    for (name, v) in labels {
        let key = FindingKey::normalize(name);
        let i = READ_FINDINGS
            .iter()
            .position(|f| *f == key.as_str())
            .ok_or_else(|| ReaderError::Validation(format!("unknown finding {name:?}")))?;
        out[i] = ReadLabel::try_from(*v).map_err(|e| ReaderError::Validation(format!("{name}: {e}")))?;
    }
    Ok(out)
}

/// One assigned scan; `display_id` is what the reader sees.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionItem {
    pub display_id: u32,
    pub output_id: String,
}

/// Server-side view of a session. The mapping from display ids to output
/// ids never leaves the server.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReaderSession {
    pub reader_id: String,
    pub items: Vec<SessionItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignMode {
    /// Sessions partition a random subset of the scans.
    Disjoint,
    /// Each reader draws independently.
    Overlapping,
}

/// Randomized, prompt-blinded sessions of `per_reader` scans each with
/// sequential display ids starting at 1.
pub fn assign_reads(
    output_ids: &[String],
    readers: &[String],
    per_reader: usize,
    seed: u64,
    mode: AssignMode,
) -> Result<Vec<ReaderSession>, ReaderError> {
    if readers.is_empty() || per_reader == 0 {
        return Err(ReaderError::Argument("need at least one reader and one scan per reader".into()));
    }
    let unique: HashSet<&String> = output_ids.iter().collect();
    if unique.len() != output_ids.len() {
        return Err(ReaderError::Argument("duplicate scan ids in manifest".into()));
    }
    if HashSet::<&String>::from_iter(readers).len() != readers.len() {
        return Err(ReaderError::Argument("duplicate reader ids".into()));
    }
    let needed = match mode {
        AssignMode::Disjoint => per_reader * readers.len(),
        AssignMode::Overlapping => per_reader,
    };
    if needed > output_ids.len() {
        return Err(ReaderError::Argument(format!(
            "{needed} scans needed, manifest has {}",
            output_ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sorted: Vec<&String> = output_ids.iter().collect();
    sorted.sort();
    let to_items = |ids: &[&String]| {
        ids.iter()
            .enumerate()
            .map(|(i, id)| SessionItem {
                display_id: i as u32 + 1,
                output_id: (*id).clone(),
            })
            .collect()
    };
    let mut sessions = vec![];
    match mode {
        AssignMode::Disjoint => {
            sorted.shuffle(&mut rng);
            for (r, reader) in readers.iter().enumerate() {
                sessions.push(ReaderSession {
                    reader_id: reader.clone(),
                    items: to_items(&sorted[r * per_reader..(r + 1) * per_reader]),
                });
            }
        }
        AssignMode::Overlapping => {
            for reader in readers {
                let mut pool = sorted.clone();
                pool.shuffle(&mut rng);
                sessions.push(ReaderSession {
                    reader_id: reader.clone(),
                    items: to_items(&pool[..per_reader]),
                });
            }
        }
    }
    Ok(sessions)
}

/// Payload for the reader client's next image. Carries nothing that
/// identifies the prompt, source scan or seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextItem {
    pub display_id: u32,
    pub image_url: String,
    pub finding_names: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub completed: usize,
    pub total: usize,
}

/// Reader-facing acknowledgement of a stored read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadAck {
    pub display_id: u32,
    pub revision: u32,
    pub progress: Progress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagKind {
    Artificial,
    ExtraAnomaly,
}

const ARTIFICIAL_WORDS: &[&str] = &[
    "artificial", "artifact", "artefact", "fake", "synthetic", "unrealistic", "unnatural", "cartoon",
    "painted", "smudge", "smudged", "blurry", "blurred", "distorted", "implausible",
];
const EXTRA_ANOMALY_WORDS: &[&str] = &[
    "extra", "additional", "also", "incidental", "device", "line", "tube", "wire", "pacemaker", "catheter",
    "clip", "foreign",
];

/// A keyword match in a note, offered to the adjudicator as a hint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Highlight {
    pub keyword: String,
    pub start: usize,
    pub end: usize,
    pub suggests: FlagKind,
}

/// Byte spans of flag keywords in `notes`, whole words, case-insensitive.
pub fn highlight_notes(notes: &str) -> Vec<Highlight> {
    let lower = notes.to_lowercase();
    // lowercasing can change byte lengths for non-ASCII text; fall back to no hints
    if lower.len() != notes.len() {
        return vec![];
    }
    let mut out = vec![];
    let mut start = None;
    let bytes = lower.as_bytes();
    for i in 0..=bytes.len() {
        let is_word = i < bytes.len() && bytes[i].is_ascii_alphanumeric();
        match (start, is_word) {
            (None, true) => start = Some(i),
            (Some(s), false) => {
                let w = &lower[s..i];
                let kind = if ARTIFICIAL_WORDS.contains(&w) {
                    Some(FlagKind::Artificial)
                } else if EXTRA_ANOMALY_WORDS.contains(&w) {
                    Some(FlagKind::ExtraAnomaly)
                } else {
                    None
                };
                if let Some(suggests) = kind {
                    out.push(Highlight {
                        keyword: notes[s..i].to_string(),
                        start: s,
                        end: i,
                        suggests,
                    });
                }
                start = None;
            }
            _ => {}
        }
    }
    out
}

/// A read waiting for a human to turn its notes into flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjudicationItem {
    pub reader_id: String,
    pub output_id: String,
    pub notes: String,
    pub highlights: Vec<Highlight>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjudicationDecision {
    pub artificial: bool,
    pub extra_anomaly: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnsurePolicy {
    /// Unsure reads stay in the denominator but never count as present.
    #[default]
    AsAbsent,
    AsPresent,
    /// Unsure reads leave the cell's denominator.
    Exclude,
}

impl UnsurePolicy {
    pub fn name(self) -> &'static str {
        match self {
            UnsurePolicy::AsAbsent => "as_absent",
            UnsurePolicy::AsPresent => "as_present",
            UnsurePolicy::Exclude => "exclude",
        }
    }
}

/// `entry[p][f]` = share of reads of scans prompted with `p` where `f` was
/// read present. Rows and columns are the read findings; a row with no
/// reads is NaN. `prompts` maps output id to prompted pathology; reads of
/// scans prompted outside the rows (e.g. unedited baselines) are counted
/// in the matrix metadata and otherwise ignored.
pub fn compute_read_cooccurrence(
    reads: &[ReadRecord],
    prompts: &HashMap<String, FindingKey>,
    policy: UnsurePolicy,
) -> Result<CooccurrenceMatrix, ReaderError> {
    let orphans: Vec<String> = reads
        .iter()
        .filter(|r| !prompts.contains_key(&r.output_id))
        .map(|r| r.output_id.clone())
        .collect();
    if !orphans.is_empty() {
        return Err(ReaderError::Orphans(orphans));
    }
    let keys = read_findings();
    let n = keys.len();
    let mut present = vec![vec![0usize; n]; n];
    let mut denom = vec![vec![0usize; n]; n];
    let mut counts = vec![0usize; n];
    let mut outside = 0usize;
    for r in reads {
        if r.labels.len() != n {
            return Err(ReaderError::Validation(format!("read of {} has {} labels", r.output_id, r.labels.len())));
        }
        let Some(row) = keys.iter().position(|k| *k == prompts[&r.output_id]) else {
            outside += 1;
            continue;
        };
        counts[row] += 1;
        for (c, l) in r.labels.iter().enumerate() {
            let (num, den) = match (l, policy) {
                (ReadLabel::Present, _) => (1, 1),
                (ReadLabel::Absent, _) => (0, 1),
                (ReadLabel::Unsure, UnsurePolicy::AsAbsent) => (0, 1),
                (ReadLabel::Unsure, UnsurePolicy::AsPresent) => (1, 1),
                (ReadLabel::Unsure, UnsurePolicy::Exclude) => (0, 0),
            };
            present[row][c] += num;
            denom[row][c] += den;
        }
    }
    let fractions = (0..n)
        .map(|r| {
            (0..n)
                .map(|c| {
                    if denom[r][c] == 0 {
                        f64::NAN
                    } else {
                        present[r][c] as f64 / denom[r][c] as f64
                    }
                })
                .collect()
        })
        .collect();
    let mut meta = BTreeMap::new();
    meta.insert("unsure_policy".into(), policy.name().into());
    meta.insert("reads".into(), reads.len().to_string());
    meta.insert("reads_outside_rows".into(), outside.to_string());
    Ok(CooccurrenceMatrix {
        row_keys: keys.clone(),
        col_keys: keys,
        fractions,
        row_counts: counts,
        meta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealismRow {
    pub reader_id: String,
    pub total: usize,
    pub artificial: usize,
    pub extra_anomaly: usize,
    pub realistic_fraction: f64,
    pub extra_anomaly_fraction: f64,
}

impl RealismRow {
    fn new(reader_id: String, total: usize, artificial: usize, extra_anomaly: usize) -> Self {
        RealismRow {
            reader_id,
            total,
            artificial,
            extra_anomaly,
            realistic_fraction: 1.0 - artificial as f64 / total as f64,
            extra_anomaly_fraction: extra_anomaly as f64 / total as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealismSummary {
    pub overall: RealismRow,
    pub per_reader: Vec<RealismRow>,
}

impl RealismSummary {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ReaderError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "reader_id",
            "total",
            "artificial",
            "extra_anomaly",
            "realistic_fraction",
            "extra_anomaly_fraction",
        ])?;
        for r in self.per_reader.iter().chain([&self.overall]) {
            out.write_record([
                r.reader_id.clone(),
                r.total.to_string(),
                r.artificial.to_string(),
                r.extra_anomaly.to_string(),
                r.realistic_fraction.to_string(),
                r.extra_anomaly_fraction.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Realistic and extra-anomaly fractions overall and per reader. Every
/// read must be adjudicated.
pub fn realism_summary(reads: &[ReadRecord]) -> Result<RealismSummary, ReaderError> {
    if reads.is_empty() {
        return Err(ReaderError::NoReads);
    }
    let pending = reads.iter().filter(|r| !r.is_adjudicated()).count();
    if pending > 0 {
        return Err(ReaderError::PendingAdjudication(pending));
    }
    let mut per: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for r in reads {
        let e = per.entry(&r.reader_id).or_default();
        e.0 += 1;
        e.1 += usize::from(r.artificial_flag == Some(true));
        e.2 += usize::from(r.extra_anomaly_flag == Some(true));
    }
    let per_reader: Vec<RealismRow> = per
        .into_iter()
        .map(|(id, (t, a, x))| RealismRow::new(id.to_string(), t, a, x))
        .collect();
    let (t, a, x) = per_reader
        .iter()
        .fold((0, 0, 0), |acc, r| (acc.0 + r.total, acc.1 + r.artificial, acc.2 + r.extra_anomaly));
    Ok(RealismSummary {
        overall: RealismRow::new("all".into(), t, a, x),
        per_reader,
    })
}

/// One row of a reader-facing session export. Unread rows and blank
/// cells are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCsvRow {
    pub display_id: u32,
    pub labels: Vec<Option<ReadLabel>>,
    pub notes: String,
}

fn finding_header() -> Vec<String> {
    READ_FINDINGS.iter().map(|s| s.to_string()).collect()
}

/// `display_id,<8 findings>,Notes`, one row per assigned scan.
pub fn write_session_csv<W: Write>(w: W, rows: &[SessionCsvRow]) -> Result<(), ReaderError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["display_id".to_string()];
    header.extend(finding_header());
    header.push("Notes".into());
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.display_id.to_string()];
        rec.extend(r.labels.iter().map(|l| l.map(|l| l.to_string()).unwrap_or_default()));
        rec.push(r.notes.clone());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

fn check_header(found: &csv::StringRecord, expected: &[String]) -> Result<(), ReaderError> {
    if found.iter().ne(expected.iter().map(String::as_str)) {
        return Err(ReaderError::Validation(format!(
            "unexpected header {:?}",
            found.iter().collect::<Vec<_>>()
        )));
    }
    Ok(())
}

pub fn read_session_csv<R: Read>(r: R) -> Result<Vec<SessionCsvRow>, ReaderError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut expected = vec!["display_id".to_string()];
    expected.extend(finding_header());
    expected.push("Notes".into());
    check_header(rd.headers()?, &expected)?;
    let mut rows = vec![];
    for rec in rd.records() {
        let rec = rec?;
        let display_id = rec[0]
            .parse()
            .map_err(|_| ReaderError::Validation(format!("bad display id {:?}", &rec[0])))?;
        let labels = (1..=READ_FINDINGS.len())
            .map(|i| parse_label_cell(&rec[i]))
            .collect::<Result<_, _>>()?;
        rows.push(SessionCsvRow {
            display_id,
            labels,
            notes: rec[READ_FINDINGS.len() + 1].to_string(),
        });
    }
    Ok(rows)
}

/// Joins a reader's session CSV back to output ids through the
/// server-side mapping. Rows without any filled cell and no notes are
/// treated as unread and skipped; blank cells read as absent. Flags stay
/// unadjudicated unless the notes are empty.
pub fn reads_from_session_csv(
    rows: &[SessionCsvRow],
    session: &ReaderSession,
) -> Result<Vec<ReadRecord>, ReaderError> {
    let map: HashMap<u32, &str> = session
        .items
        .iter()
        .map(|i| (i.display_id, i.output_id.as_str()))
        .collect();
    let mut out = vec![];
    for r in rows {
        let output_id = map
            .get(&r.display_id)
            .ok_or_else(|| ReaderError::NotFound(format!("display id {} not in session", r.display_id)))?;
        if r.labels.iter().all(Option::is_none) && r.notes.is_empty() {
            continue;
        }
        let flag = r.notes.trim().is_empty().then_some(false);
        out.push(ReadRecord {
            reader_id: session.reader_id.clone(),
            output_id: output_id.to_string(),
            labels: r.labels.iter().map(|l| l.unwrap_or_default()).collect(),
            notes: r.notes.clone(),
            artificial_flag: flag,
            extra_anomaly_flag: flag,
        });
    }
    Ok(out)
}

fn flag_cell(f: Option<bool>) -> String {
    match f {
        None => String::new(),
        Some(b) => (b as u8).to_string(),
    }
}

fn parse_flag(cell: &str) -> Result<Option<bool>, ReaderError> {
    match cell.trim() {
        "" => Ok(None),
        "0" => Ok(Some(false)),
        "1" => Ok(Some(true)),
        other => Err(ReaderError::Validation(format!("flag {other:?} is not 0 or 1"))),
    }
}

const ADMIN_PREFIX: [&str; 2] = ["reader_id", "output_id"];
const ADMIN_SUFFIX: [&str; 3] = ["Notes", "artificial_flag", "extra_anomaly_flag"];

fn admin_header() -> Vec<String> {
    let mut h: Vec<String> = ADMIN_PREFIX.iter().map(|s| s.to_string()).collect();
    h.extend(finding_header());
    h.extend(ADMIN_SUFFIX.iter().map(|s| s.to_string()));
    h
}

/// Unblinded study export: `reader_id,output_id,<8 findings>,Notes,artificial_flag,extra_anomaly_flag`.
pub fn write_reads_csv<W: Write>(w: W, reads: &[ReadRecord]) -> Result<(), ReaderError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(admin_header())?;
    for r in reads {
        let mut rec = vec![r.reader_id.clone(), r.output_id.clone()];
        rec.extend(r.labels.iter().map(|l| l.to_string()));
        rec.push(r.notes.clone());
        rec.push(flag_cell(r.artificial_flag));
        rec.push(flag_cell(r.extra_anomaly_flag));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_reads_csv<R: Read>(r: R) -> Result<Vec<ReadRecord>, ReaderError> {
    let mut rd = csv::Reader::from_reader(r);
    check_header(rd.headers()?, &admin_header())?;
    let n = READ_FINDINGS.len();
    let mut seen = HashSet::new();
    let mut out = vec![];
    for rec in rd.records() {
        let rec = rec?;
        let labels = (2..2 + n)
            .map(|i| parse_label_cell(&rec[i]).map(Option::unwrap_or_default))
            .collect::<Result<_, _>>()?;
        let read = ReadRecord {
            reader_id: rec[0].to_string(),
            output_id: rec[1].to_string(),
            labels,
            notes: rec[2 + n].to_string(),
            artificial_flag: parse_flag(&rec[3 + n])?,
            extra_anomaly_flag: parse_flag(&rec[4 + n])?,
        };
        if !seen.insert((read.reader_id.clone(), read.output_id.clone())) {
            return Err(ReaderError::Conflict(format!(
                "two reads of {} by {}",
                read.output_id, read.reader_id
            )));
        }
        out.push(read);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
