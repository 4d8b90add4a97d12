//! Cohort ingestion, inclusion filtering, no-finding selection, real-data
//! co-occurrence and patient-level splits.
//!
//! Each public cohort ships a differently shaped metadata CSV; the readers
//! below normalize them into [`LabeledScan`] rows keyed by the cohort's
//! [`LabelVocabulary`]. Uncertain labels are mapped to absent on ingestion.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate};
use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::findings::{Cohort, FindingKey, LabelVocabulary, PADCHEST_ALIASES};
use crate::labels::{LabelValue, LabelVector};
use crate::matrix::CooccurrenceMatrix;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{cohort} metadata is missing required columns: {missing:?}")]
    Schema { cohort: Cohort, missing: Vec<String> },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CohortError + '_ {
    move |source| CohortError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum View {
    Pa,
    Ap,
    Other,
}

impl View {
    pub fn is_frontal(self) -> bool {
        matches!(self, View::Pa | View::Ap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Sex {
    F,
    M,
    Unknown,
}

fn parse_sex(s: &str) -> Sex {
    match s.trim().to_ascii_lowercase().as_str() {
        "f" | "female" => Sex::F,
        "m" | "male" => Sex::M,
        _ => Sex::Unknown,
    }
}

fn parse_view(s: &str) -> View {
    match s.trim().to_ascii_uppercase().as_str() {
        "PA" => View::Pa,
        "AP" | "AP_HORIZONTAL" | "AP AXIAL" | "AP_AXIAL" => View::Ap,
        _ => View::Other,
    }
}

pub fn parse_date(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    let s = s.split('.').next().unwrap_or(s);
    NaiveDate::parse_from_str(s, "%Y%m%d")
        .or_else(|_| NaiveDate::parse_from_str(s, "%Y-%m-%d"))
        .ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub scan_id: String,
    pub patient_id: String,
    pub cohort: Cohort,
    pub view: View,
    pub age_years: f64,
    pub sex: Sex,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study_date: Option<NaiveDate>,
}

/// A scan with its cohort-vocabulary labels; one line of the cohort manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScan {
    #[serde(flatten)]
    pub scan: ScanRecord,
    pub labels: LabelVector,
}

impl LabeledScan {
    pub fn vocabulary(&self) -> LabelVocabulary {
        self.scan.cohort.vocabulary()
    }

    /// Label for a study finding through the cohort alias map; `None` when
    /// the cohort does not label that finding.
    pub fn study_label(&self, study: &str) -> Option<LabelValue> {
        let alias = self.scan.cohort.study_alias(study)?;
        self.labels.get(&self.vocabulary(), alias)
    }

    pub fn is_no_finding(&self) -> Option<bool> {
        let rule = self.vocabulary().no_finding_rule()?;
        Some(self.labels.is_no_finding(rule))
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// Prefix joined onto relative image paths.
    pub image_root: Option<PathBuf>,
    /// Skip rows whose image file does not exist.
    pub check_images: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedRow {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub parsed: usize,
    pub skipped: Vec<SkippedRow>,
    pub notes: Vec<String>,
}

const CHEXPERT_COLUMNS: [&str; 14] = [
    "No Finding",
    "Atelectasis",
    "Consolidation",
    "Pneumothorax",
    "Edema",
    "Pleural Effusion",
    "Pneumonia",
    "Pleural Other",
    "Cardiomegaly",
    "Lung Lesion",
    "Lung Opacity",
    "Enlarged Cardiomediastinum",
    "Fracture",
    "Support Devices",
];

struct Columns {
    index: HashMap<String, usize>,
}

impl Columns {
    fn new(header: &csv::StringRecord) -> Self {
        Columns {
            index: header
                .iter()
                .enumerate()
                .map(|(i, h)| (h.trim().to_string(), i))
                .collect(),
        }
    }

    fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    fn require(&self, cohort: Cohort, names: &[&str]) -> Result<(), CohortError> {
        let missing: Vec<String> = names
            .iter()
            .filter(|n| !self.has(n))
            .map(|n| n.to_string())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(CohortError::Schema { cohort, missing })
        }
    }

    fn get<'r>(&self, rec: &'r csv::StringRecord, name: &str) -> &'r str {
        self.index
            .get(name)
            .and_then(|&i| rec.get(i))
            .map(str::trim)
            .unwrap_or("")
    }

    fn first_of<'r>(&self, rec: &'r csv::StringRecord, names: &[&str]) -> Option<&'r str> {
        names
            .iter()
            .find(|n| self.has(n))
            .map(|n| self.get(rec, n))
    }
}

type RowResult = Result<LabeledScan, String>;

fn parse_age(s: &str) -> Result<f64, String> {
    let t = s.trim().trim_end_matches(['Y', 'y']);
    if t.is_empty() {
        return Err("missing age".into());
    }
    let age: f64 = t.parse().map_err(|_| format!("unparseable age {s:?}"))?;
    if !age.is_finite() || age < 0.0 {
        return Err(format!("invalid age {s:?}"));
    }
    Ok(age)
}

fn chexpert_value(s: &str) -> Result<LabelValue, String> {
    match s.trim() {
        "" => Ok(LabelValue::Absent),
        t => match t.parse::<f64>() {
            Ok(v) if v == 1.0 => Ok(LabelValue::Present),
            Ok(v) if v == 0.0 => Ok(LabelValue::Absent),
            Ok(v) if v == -1.0 => Ok(LabelValue::Unsure),
            _ => Err(format!("unparseable label value {t:?}")),
        },
    }
}

fn nih_row(cols: &Columns, rec: &csv::StringRecord, notes: &mut BTreeSet<String>) -> RowResult {
    let vocab = Cohort::Nih.vocabulary();
    let mut labels = LabelVector::absent(vocab.len());
    for raw in cols.get(rec, "Finding Labels").split('|') {
        let raw = raw.trim();
        if raw.is_empty() || raw.eq_ignore_ascii_case("No Finding") {
            continue;
        }
        let mut key = FindingKey::normalize(raw);
        if key.as_str() == "effusion" {
            key = FindingKey::new("pleural_effusion");
        }
        if !labels.set(&vocab, key.as_str(), LabelValue::Present) {
            notes.insert(format!("ignored unknown NIH label {raw:?}"));
        }
    }
    let age = parse_age(cols.get(rec, "Patient Age"))?;
    let study_date = cols
        .first_of(rec, &["Study Date", "StudyDate", "study_date"])
        .filter(|s| !s.is_empty())
        .map(|s| parse_date(s).ok_or_else(|| format!("unparseable date {s:?}")))
        .transpose()?;
    Ok(LabeledScan {
        scan: ScanRecord {
            scan_id: cols.get(rec, "Image Index").to_string(),
            patient_id: cols.get(rec, "Patient ID").to_string(),
            cohort: Cohort::Nih,
            view: parse_view(cols.get(rec, "View Position")),
            age_years: age,
            sex: parse_sex(cols.get(rec, "Patient Gender")),
            image_path: cols.get(rec, "Image Index").to_string(),
            study_date,
        },
        labels,
    })
}

fn chexpert_labels(cols: &Columns, rec: &csv::StringRecord) -> Result<LabelVector, String> {
    let vocab = Cohort::Chexpert.vocabulary();
    let mut labels = LabelVector::absent(vocab.len());
    for col in CHEXPERT_COLUMNS {
        let v = chexpert_value(cols.get(rec, col))?.uncertain_as_negative();
        labels.set(&vocab, FindingKey::normalize(col).as_str(), v);
    }
    let rule = vocab.no_finding_rule().expect("chexpert vocabulary has no_finding");
    labels.reconcile_no_finding(rule);
    Ok(labels)
}

fn mimic_row(cols: &Columns, rec: &csv::StringRecord) -> RowResult {
    let labels = chexpert_labels(cols, rec)?;
    let study_date = cols
        .first_of(rec, &["StudyDate", "study_date"])
        .filter(|s| !s.is_empty())
        .map(|s| parse_date(s).ok_or_else(|| format!("unparseable date {s:?}")))
        .transpose()?;
    let age = if cols.has("age") {
        parse_age(cols.get(rec, "age"))?
    } else {
        let anchor_age = parse_age(cols.get(rec, "anchor_age"))?;
        let anchor_year: i32 = cols
            .get(rec, "anchor_year")
            .parse()
            .map_err(|_| "unparseable anchor_year".to_string())?;
        let date = study_date.ok_or("missing StudyDate for anchor-age computation")?;
        anchor_age + (date.year() - anchor_year) as f64
    };
    let subject = cols.get(rec, "subject_id");
    let study = cols.get(rec, "study_id");
    let dicom = cols.get(rec, "dicom_id");
    let image_path = match cols.first_of(rec, &["path", "Path"]) {
        Some(p) if !p.is_empty() => p.to_string(),
        _ => format!(
            "files/p{}/p{}/s{}/{}.jpg",
            subject.get(..2).unwrap_or(subject),
            subject,
            study,
            dicom
        ),
    };
    Ok(LabeledScan {
        scan: ScanRecord {
            scan_id: dicom.to_string(),
            patient_id: subject.to_string(),
            cohort: Cohort::Mimic,
            view: parse_view(cols.get(rec, "ViewPosition")),
            age_years: age,
            sex: parse_sex(cols.first_of(rec, &["gender", "sex", "Sex"]).unwrap_or("")),
            image_path,
            study_date,
        },
        labels,
    })
}

fn chexpert_row(cols: &Columns, rec: &csv::StringRecord) -> RowResult {
    let labels = chexpert_labels(cols, rec)?;
    let path = cols.get(rec, "Path");
    let patient = path
        .split('/')
        .find(|seg| seg.starts_with("patient"))
        .ok_or_else(|| format!("no patient segment in path {path:?}"))?;
    let view = if cols.get(rec, "Frontal/Lateral").eq_ignore_ascii_case("lateral") {
        View::Other
    } else {
        parse_view(cols.get(rec, "AP/PA"))
    };
    Ok(LabeledScan {
        scan: ScanRecord {
            scan_id: path.to_string(),
            patient_id: patient.to_string(),
            cohort: Cohort::Chexpert,
            view,
            age_years: parse_age(cols.get(rec, "Age"))?,
            sex: parse_sex(cols.get(rec, "Sex")),
            image_path: path.to_string(),
            study_date: None,
        },
        labels,
    })
}

/// Splits the curators' list-literal label column, e.g. `['normal']` or
/// `['pleural effusion', 'cardiomegaly']`.
pub fn split_padchest_labels(raw: &str) -> Vec<String> {
    raw.trim()
        .trim_start_matches('[')
        .trim_end_matches(']')
        .split(',')
        .map(|s| {
            s.trim()
                .trim_matches(|c| c == '\'' || c == '"')
                .trim()
                .to_ascii_lowercase()
        })
        .filter(|s| !s.is_empty())
        .collect()
}

fn padchest_row(cols: &Columns, rec: &csv::StringRecord) -> RowResult {
    let vocab = Cohort::Padchest.vocabulary();
    let mut labels = LabelVector::absent(vocab.len());
    for label in split_padchest_labels(cols.get(rec, "Labels")) {
        if let Some((_, key)) = PADCHEST_ALIASES.iter().find(|(alias, _)| *alias == label) {
            labels.set(&vocab, key, LabelValue::Present);
        }
    }
    labels.reconcile_no_finding(vocab.no_finding_rule().expect("padchest has no_finding"));
    let date_raw = cols.get(rec, "StudyDate_DICOM");
    let date = parse_date(date_raw).ok_or_else(|| {
        if date_raw.is_empty() {
            "missing age".to_string()
        } else {
            format!("unparseable date {date_raw:?}")
        }
    })?;
    let birth = cols.get(rec, "PatientBirth");
    if birth.is_empty() {
        return Err("missing age".into());
    }
    let birth_year: f64 = birth
        .split('.')
        .next()
        .unwrap_or(birth)
        .parse()
        .map_err(|_| format!("unparseable birth year {birth:?}"))?;
    let age = date.year() as f64 - birth_year;
    if age < 0.0 {
        return Err(format!("birth year {birth} after study date"));
    }
    let dir = cols.get(rec, "ImageDir");
    let id = cols.get(rec, "ImageID");
    Ok(LabeledScan {
        scan: ScanRecord {
            scan_id: id.to_string(),
            patient_id: cols.get(rec, "PatientID").to_string(),
            cohort: Cohort::Padchest,
            view: parse_view(cols.get(rec, "Projection")),
            age_years: age,
            sex: parse_sex(cols.get(rec, "PatientSex_DICOM")),
            image_path: if dir.is_empty() {
                id.to_string()
            } else {
                format!("{dir}/{id}")
            },
            study_date: Some(date),
        },
        labels,
    })
}

/// Generic schema used for synthetic cohorts: the scan fields plus one
/// column per vocabulary key holding 0/1.
fn synthetic_row(cols: &Columns, rec: &csv::StringRecord) -> RowResult {
    let vocab = Cohort::Synthetic.vocabulary();
    let mut labels = LabelVector::absent(vocab.len());
    for key in &vocab.findings {
        if cols.has(key.as_str()) {
            labels.set(&vocab, key.as_str(), chexpert_value(cols.get(rec, key.as_str()))?);
        }
    }
    let study_date = Some(cols.get(rec, "study_date"))
        .filter(|s| !s.is_empty())
        .map(|s| parse_date(s).ok_or_else(|| format!("unparseable date {s:?}")))
        .transpose()?;
    Ok(LabeledScan {
        scan: ScanRecord {
            scan_id: cols.get(rec, "scan_id").to_string(),
            patient_id: cols.get(rec, "patient_id").to_string(),
            cohort: Cohort::Synthetic,
            view: parse_view(cols.get(rec, "view")),
            age_years: parse_age(cols.get(rec, "age_years"))?,
            sex: parse_sex(cols.get(rec, "sex")),
            image_path: cols.get(rec, "image_path").to_string(),
            study_date,
        },
        labels: labels.uncertain_as_negative(),
    })
}

fn required_columns(cohort: Cohort, cols: &Columns) -> Vec<&'static str> {
    match cohort {
        Cohort::Nih => vec![
            "Image Index",
            "Finding Labels",
            "Patient ID",
            "Patient Age",
            "Patient Gender",
            "View Position",
        ],
        Cohort::Mimic => {
            let mut v = vec!["dicom_id", "subject_id", "ViewPosition"];
            v.extend(CHEXPERT_COLUMNS);
            if !cols.has("age") {
                v.extend(["anchor_age", "anchor_year"]);
            }
            v
        }
        Cohort::Chexpert => {
            let mut v = vec!["Path", "Sex", "Age", "Frontal/Lateral", "AP/PA"];
            v.extend(CHEXPERT_COLUMNS);
            v
        }
        Cohort::Padchest => vec![
            "ImageID",
            "StudyDate_DICOM",
            "PatientID",
            "PatientBirth",
            "PatientSex_DICOM",
            "Projection",
            "Labels",
        ],
        Cohort::Synthetic => vec!["scan_id", "patient_id", "view", "age_years", "image_path"],
    }
}

/// Parses one cohort metadata CSV. Rows that fail to parse are skipped
/// and reported; schema problems abort.
pub fn ingest_reader<R: Read>(
    reader: R,
    cohort: Cohort,
    opts: &IngestOptions,
) -> Result<(Vec<LabeledScan>, IngestReport), CohortError> {
    let mut rd = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let cols = Columns::new(rd.headers()?);
    cols.require(cohort, &required_columns(cohort, &cols))?;

    let mut report = IngestReport::default();
    let mut notes = BTreeSet::new();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 2;
        report.rows_read += 1;
        let rec = rec?;
        let parsed = match cohort {
            Cohort::Nih => nih_row(&cols, &rec, &mut notes),
            Cohort::Mimic => mimic_row(&cols, &rec),
            Cohort::Chexpert => chexpert_row(&cols, &rec),
            Cohort::Padchest => padchest_row(&cols, &rec),
            Cohort::Synthetic => synthetic_row(&cols, &rec),
        };
        let mut scan = match parsed {
            Ok(s) => s,
            Err(reason) => {
                warn!("{cohort} line {line}: skipped ({reason})");
                report.skipped.push(SkippedRow { line, reason });
                continue;
            }
        };
        if scan.scan.scan_id.is_empty() || scan.scan.patient_id.is_empty() {
            report.skipped.push(SkippedRow {
                line,
                reason: "empty scan or patient id".into(),
            });
            continue;
        }
        if !seen.insert(scan.scan.scan_id.clone()) {
            report.skipped.push(SkippedRow {
                line,
                reason: format!("duplicate scan_id {}", scan.scan.scan_id),
            });
            continue;
        }
        if let Some(root) = &opts.image_root {
            let p = Path::new(&scan.scan.image_path);
            if p.is_relative() {
                scan.scan.image_path = root.join(p).display().to_string();
            }
        }
        if opts.check_images && !Path::new(&scan.scan.image_path).exists() {
            report.skipped.push(SkippedRow {
                line,
                reason: format!("image not found: {}", scan.scan.image_path),
            });
            continue;
        }
        out.push(scan);
    }
    if cohort == Cohort::Padchest {
        notes.insert(
            "PadChest labels collapsed onto study findings through a fixed alias map".into(),
        );
    }
    report.parsed = out.len();
    report.notes = notes.into_iter().collect();
    Ok((out, report))
}

pub fn ingest_cohort(
    metadata_file: &Path,
    cohort: Cohort,
    opts: &IngestOptions,
) -> Result<(Vec<LabeledScan>, IngestReport), CohortError> {
    let f = File::open(metadata_file).map_err(io_err(metadata_file))?;
    ingest_reader(BufReader::new(f), cohort, opts)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub kept: usize,
    pub removed_view: usize,
    pub removed_age: usize,
    pub patients_kept: usize,
}

pub const MIN_AGE_YEARS: f64 = 18.0;

fn view_allowed(cohort: Cohort, view: View) -> bool {
    match cohort {
        Cohort::Nih | Cohort::Chexpert => view == View::Pa,
        Cohort::Mimic | Cohort::Padchest | Cohort::Synthetic => view.is_frontal(),
    }
}

/// Keeps adult scans in the cohort's admissible views. Total and idempotent.
pub fn apply_inclusion_filter(
    records: &[LabeledScan],
    cohort: Cohort,
) -> (Vec<LabeledScan>, FilterReport) {
    let mut report = FilterReport {
        input: records.len(),
        ..Default::default()
    };
    let kept: Vec<LabeledScan> = records
        .iter()
        .filter(|r| {
            if !view_allowed(cohort, r.scan.view) {
                report.removed_view += 1;
                false
            } else if r.scan.age_years < MIN_AGE_YEARS {
                report.removed_age += 1;
                false
            } else {
                true
            }
        })
        .cloned()
        .collect();
    report.kept = kept.len();
    report.patients_kept = kept
        .iter()
        .map(|r| r.scan.patient_id.as_str())
        .collect::<HashSet<_>>()
        .len();
    (kept, report)
}

pub fn select_no_finding(records: &[LabeledScan]) -> Result<Vec<LabeledScan>, CohortError> {
    let mut out = Vec::new();
    for r in records {
        match r.is_no_finding() {
            Some(true) => out.push(r.clone()),
            Some(false) => {}
            None => {
                return Err(CohortError::Config(format!(
                    "{} vocabulary has no no_finding entry",
                    r.scan.cohort
                )))
            }
        }
    }
    Ok(out)
}

/// Seeded sample of `n` no-finding scans, one per patient, ordered by scan id.
pub fn sample_no_finding(
    records: &[LabeledScan],
    n: usize,
    seed: u64,
) -> Result<Vec<LabeledScan>, CohortError> {
    let mut pool = select_no_finding(records)?;
    pool.sort_by(|a, b| a.scan.scan_id.cmp(&b.scan.scan_id));
    let mut seen = HashSet::new();
    pool.retain(|r| seen.insert(r.scan.patient_id.clone()));
    if n > pool.len() {
        return Err(CohortError::Argument(format!(
            "requested {n} no-finding scans but only {} patients qualify",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    pool.truncate(n);
    pool.sort_by(|a, b| a.scan.scan_id.cmp(&b.scan.scan_id));
    Ok(pool)
}

/// `entry[a][b]` = fraction of scans labeled `a` that are also labeled `b`.
/// Findings are vocabulary keys; rows with no positives are NaN.
pub fn real_cooccurrence(records: &[LabeledScan], findings: &[FindingKey]) -> CooccurrenceMatrix {
    let n = findings.len();
    let mut counts = vec![0usize; n];
    let mut joint = vec![vec![0usize; n]; n];
    for r in records {
        let vocab = r.vocabulary();
        let present: Vec<bool> = findings
            .iter()
            .map(|f| {
                r.labels
                    .get(&vocab, f.as_str())
                    .is_some_and(|v| v.is_present())
            })
            .collect();
        for a in 0..n {
            if !present[a] {
                continue;
            }
            counts[a] += 1;
            for b in 0..n {
                if present[b] {
                    joint[a][b] += 1;
                }
            }
        }
    }
    let fractions = (0..n)
        .map(|a| {
            (0..n)
                .map(|b| {
                    if counts[a] == 0 {
                        f64::NAN
                    } else {
                        joint[a][b] as f64 / counts[a] as f64
                    }
                })
                .collect()
        })
        .collect();
    let mut meta = BTreeMap::new();
    meta.insert("source".into(), "real cohort labels".into());
    CooccurrenceMatrix {
        row_keys: findings.to_vec(),
        col_keys: findings.to_vec(),
        fractions,
        row_counts: counts,
        meta,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub patient_id: String,
    pub split: Split,
    pub seed: u64,
}

fn distinct_patients(records: &[LabeledScan]) -> Vec<String> {
    records
        .iter()
        .map(|r| r.scan.patient_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Draws `n_train_patients` patients into TRAIN; everyone else is TEST.
/// Output is sorted by patient id.
pub fn make_split(
    records: &[LabeledScan],
    n_train_patients: usize,
    seed: u64,
) -> Result<Vec<SplitAssignment>, CohortError> {
    let mut patients = distinct_patients(records);
    if n_train_patients > patients.len() {
        return Err(CohortError::Argument(format!(
            "n_train_patients {n_train_patients} exceeds {} distinct patients",
            patients.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    let mut out: Vec<SplitAssignment> = patients
        .into_iter()
        .enumerate()
        .map(|(i, patient_id)| SplitAssignment {
            patient_id,
            split: if i < n_train_patients {
                Split::Train
            } else {
                Split::Test
            },
            seed,
        })
        .collect();
    out.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    Ok(out)
}

/// Moves `round(fraction * |TRAIN|)` training patients into VAL.
pub fn carve_validation(assignments: &mut [SplitAssignment], fraction: f64, seed: u64) {
    let mut train: Vec<usize> = assignments
        .iter()
        .enumerate()
        .filter(|(_, a)| a.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    let n_val = (train.len() as f64 * fraction.clamp(0.0, 1.0)).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::hashing::sub_seed(seed, "validation"));
    train.shuffle(&mut rng);
    for &i in &train[..n_val] {
        assignments[i].split = Split::Val;
    }
}

/// Scan counts per split.
pub fn split_scan_counts(
    records: &[LabeledScan],
    assignments: &[SplitAssignment],
) -> BTreeMap<Split, usize> {
    let by_patient: HashMap<&str, Split> = assignments
        .iter()
        .map(|a| (a.patient_id.as_str(), a.split))
        .collect();
    let mut counts = BTreeMap::new();
    for r in records {
        if let Some(s) = by_patient.get(r.scan.patient_id.as_str()) {
            *counts.entry(*s).or_insert(0) += 1;
        }
    }
    counts
}

pub fn write_split_csv<W: Write>(w: W, assignments: &[SplitAssignment]) -> Result<(), CohortError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["patient_id", "split", "seed"])?;
    for a in assignments {
        let split = match a.split {
            Split::Train => "TRAIN",
            Split::Val => "VAL",
            Split::Test => "TEST",
        };
        out.write_record([a.patient_id.as_str(), split, &a.seed.to_string()])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_split_csv<R: Read>(r: R) -> Result<Vec<SplitAssignment>, CohortError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let bad = |m: &str| CohortError::Manifest {
            line: i + 2,
            message: m.to_string(),
        };
        let split = match rec.get(1).unwrap_or("") {
            "TRAIN" => Split::Train,
            "VAL" => Split::Val,
            "TEST" => Split::Test,
            other => return Err(bad(&format!("unknown split {other:?}"))),
        };
        out.push(SplitAssignment {
            patient_id: rec.get(0).unwrap_or("").to_string(),
            split,
            seed: rec
                .get(2)
                .unwrap_or("")
                .parse()
                .map_err(|_| bad("unparseable seed"))?,
        });
    }
    Ok(out)
}

/// Writes the normalized cohort manifest, one JSON object per scan.
pub fn write_manifest<W: Write>(mut w: W, records: &[LabeledScan]) -> Result<(), CohortError> {
    let to_io = |e: std::io::Error| CohortError::Io {
        path: "<manifest>".into(),
        source: e,
    };
    for r in records {
        let line = serde_json::to_string(r).expect("scan records serialize");
        writeln!(w, "{line}").map_err(to_io)?;
    }
    w.flush().map_err(to_io)
}

pub fn read_manifest<R: Read>(r: R) -> Result<Vec<LabeledScan>, CohortError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line.map_err(|e| CohortError::Io {
            path: "<manifest>".into(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| CohortError::Manifest {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}
