//! Counterfactual stress test: predictions on baseline and edited scans,
//! percentile conversion against a reference cohort, and median
//! percentile-change matrices.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use image::GrayImage;
use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::findings::FindingKey;
use crate::hashing::sha256_hex;
use crate::imaging::{encode_png, load_gray, resize_square, save_png};
use crate::matrix::{fmt_cell, CooccurrenceMatrix};
use crate::stats::{median, PercentileReference, StatsError};

#[derive(Debug, Error)]
pub enum StressError {
    #[error("adapter {adapter} does not support findings {missing:?}")]
    UnsupportedFinding { adapter: String, missing: Vec<String> },
    #[error("adapter failure: {0}")]
    Adapter(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("no reference predictions for {0}")]
    MissingReference(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Invocation {
    #[serde(alias = "IN_PROCESS")]
    InProcess,
    #[serde(alias = "SUBPROCESS")]
    Subprocess,
    #[serde(alias = "HTTP")]
    Http,
}

/// A multi-label image classifier returning one probability per finding.
pub trait Classifier: Send + Sync {
    fn name(&self) -> &str;
    fn findings(&self) -> &[FindingKey];
    fn input_size(&self) -> u32;
    fn invocation(&self) -> Invocation {
        Invocation::InProcess
    }
    /// `image` is already at `input_size`.
    fn predict(&self, image: &GrayImage) -> Result<Vec<f64>, StressError>;
}

/// Returns the same probability for every finding and image.
#[derive(Debug, Clone)]
pub struct ConstantClassifier {
    pub name: String,
    pub findings: Vec<FindingKey>,
    pub value: f64,
    pub input_size: u32,
}

impl Classifier for ConstantClassifier {
    fn name(&self) -> &str {
        &self.name
    }
    fn findings(&self) -> &[FindingKey] {
        &self.findings
    }
    fn input_size(&self) -> u32 {
        self.input_size
    }
    fn predict(&self, _: &GrayImage) -> Result<Vec<f64>, StressError> {
        Ok(vec![self.value; self.findings.len()])
    }
}

fn parse_probabilities(body: &str, findings: &[FindingKey]) -> Result<Vec<f64>, StressError> {
    let map: BTreeMap<String, f64> = serde_json::from_str(body.trim())
        .map_err(|e| StressError::Adapter(format!("bad adapter output {body:?}: {e}")))?;
    findings
        .iter()
        .map(|f| {
            map.get(f.as_str())
                .copied()
                .ok_or_else(|| StressError::Adapter(format!("adapter output lacks {f}")))
        })
        .collect()
}

static SCRATCH_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Runs `command... <png path>` per image; stdout must be a JSON object
/// mapping finding keys to probabilities.
#[derive(Debug, Clone)]
pub struct SubprocessClassifier {
    pub name: String,
    pub findings: Vec<FindingKey>,
    pub input_size: u32,
    pub command: Vec<String>,
    pub scratch: std::path::PathBuf,
}

impl Classifier for SubprocessClassifier {
    fn name(&self) -> &str {
        &self.name
    }
    fn findings(&self) -> &[FindingKey] {
        &self.findings
    }
    fn input_size(&self) -> u32 {
        self.input_size
    }
    fn invocation(&self) -> Invocation {
        Invocation::Subprocess
    }
    fn predict(&self, image: &GrayImage) -> Result<Vec<f64>, StressError> {
        let bytes = encode_png(image).map_err(|e| StressError::Adapter(e.to_string()))?;
        let n = SCRATCH_COUNTER.fetch_add(1, Ordering::Relaxed);
        let path = self
            .scratch
            .join(format!("{}-{}-{n}.png", &sha256_hex(&bytes)[..16], std::process::id()));
        save_png(image, &path).map_err(|e| StressError::Adapter(e.to_string()))?;
        let (prog, args) = self
            .command
            .split_first()
            .ok_or_else(|| StressError::Adapter("empty adapter command".into()))?;
        let out = Command::new(prog)
            .args(args)
            .arg(&path)
            .output()
            .map_err(|e| StressError::Adapter(format!("spawn {prog}: {e}")))?;
        let _ = std::fs::remove_file(&path);
        if !out.status.success() {
            return Err(StressError::Adapter(format!(
                "{prog} exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        parse_probabilities(&String::from_utf8_lossy(&out.stdout), &self.findings)
    }
}

/// POSTs PNG bytes to an endpoint answering with the same JSON object as
/// [`SubprocessClassifier`].
#[derive(Debug, Clone)]
pub struct HttpClassifier {
    pub name: String,
    pub findings: Vec<FindingKey>,
    pub input_size: u32,
    pub endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpClassifier {
    pub fn new(name: String, findings: Vec<FindingKey>, input_size: u32, endpoint: String) -> Result<Self, StressError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| StressError::Adapter(e.to_string()))?;
        Ok(HttpClassifier {
            name,
            findings,
            input_size,
            endpoint,
            client,
        })
    }
}

impl Classifier for HttpClassifier {
    fn name(&self) -> &str {
        &self.name
    }
    fn findings(&self) -> &[FindingKey] {
        &self.findings
    }
    fn input_size(&self) -> u32 {
        self.input_size
    }
    fn invocation(&self) -> Invocation {
        Invocation::Http
    }
    fn predict(&self, image: &GrayImage) -> Result<Vec<f64>, StressError> {
        let bytes = encode_png(image).map_err(|e| StressError::Adapter(e.to_string()))?;
        let resp = self
            .client
            .post(&self.endpoint)
            .header("content-type", "image/png")
            .body(bytes)
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| StressError::Adapter(format!("{}: {e}", self.endpoint)))?;
        let body = resp.text().map_err(|e| StressError::Adapter(e.to_string()))?;
        parse_probabilities(&body, &self.findings)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Baseline,
    Counterfactual,
    Reference,
}

/// One image to score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictItem {
    pub scan_id: String,
    pub image_path: String,
    pub source: Source,
    /// Baseline scan an edit was made from; the scan itself otherwise.
    pub patient_key: String,
    pub added_pathology: Option<FindingKey>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub item: PredictItem,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFailure {
    pub scan_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTable {
    pub adapter: String,
    pub findings: Vec<FindingKey>,
    pub rows: Vec<PredictionRow>,
    pub failures: Vec<PredictionFailure>,
}

impl PredictionTable {
    pub fn column(&self, finding: &str) -> Option<usize> {
        self.findings.iter().position(|f| f.as_str() == finding)
    }

    pub fn values(&self, finding: &str, source: Source) -> Vec<f64> {
        let Some(c) = self.column(finding) else {
            return vec![];
        };
        self.rows
            .iter()
            .filter(|r| r.item.source == source)
            .map(|r| r.probabilities[c])
            .collect()
    }

    /// Long format: scan_id, finding, probability, adapter, source, added_pathology.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), StressError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["scan_id", "finding", "probability", "adapter", "source", "added_pathology"])?;
        for r in &self.rows {
            let source = match r.item.source {
                Source::Baseline => "baseline",
                Source::Counterfactual => "counterfactual",
                Source::Reference => "reference",
            };
            for (f, p) in self.findings.iter().zip(&r.probabilities) {
                out.write_record([
                    r.item.scan_id.as_str(),
                    f.as_str(),
                    &p.to_string(),
                    &self.adapter,
                    source,
                    r.item.added_pathology.as_ref().map(|a| a.as_str()).unwrap_or(""),
                ])?;
            }
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

pub fn check_supported(adapter: &dyn Classifier, findings: &[FindingKey]) -> Result<Vec<usize>, StressError> {
    let supported = adapter.findings();
    let mut idx = Vec::new();
    let mut missing = Vec::new();
    for f in findings {
        match supported.iter().position(|s| s == f) {
            Some(i) => idx.push(i),
            None => missing.push(f.to_string()),
        }
    }
    if missing.is_empty() {
        Ok(idx)
    } else {
        Err(StressError::UnsupportedFinding {
            adapter: adapter.name().to_string(),
            missing,
        })
    }
}

/// Scores images that are already in memory.
pub fn predict_images(
    adapter: &dyn Classifier,
    items: &[(PredictItem, GrayImage)],
    findings: &[FindingKey],
    exec: Exec,
) -> Result<PredictionTable, StressError> {
    let idx = check_supported(adapter, findings)?;
    let size = adapter.input_size();
    let results = exec.map(items, |(_, img)| {
        let img = if img.width() == size && img.height() == size {
            img.clone()
        } else {
            resize_square(img, size)
        };
        let probs = adapter.predict(&img)?;
        if probs.len() != adapter.findings().len() {
            return Err(StressError::Adapter(format!(
                "adapter returned {} values for {} findings",
                probs.len(),
                adapter.findings().len()
            )));
        }
        let picked: Vec<f64> = idx.iter().map(|&i| probs[i]).collect();
        if let Some(bad) = picked.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(StressError::Adapter(format!("probability {bad} outside [0, 1]")));
        }
        Ok(picked)
    });
    let mut table = PredictionTable {
        adapter: adapter.name().to_string(),
        findings: findings.to_vec(),
        rows: Vec::new(),
        failures: Vec::new(),
    };
    for ((item, _), res) in items.iter().zip(results) {
        match res {
            Ok(probabilities) => table.rows.push(PredictionRow {
                item: item.clone(),
                probabilities,
            }),
            Err(e) => {
                warn!("prediction failed for {}: {e}", item.scan_id);
                table.failures.push(PredictionFailure {
                    scan_id: item.scan_id.clone(),
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(table)
}

/// Loads and scores images from disk; unreadable images become failures.
pub fn predict_cohort(
    adapter: &dyn Classifier,
    items: &[PredictItem],
    findings: &[FindingKey],
    exec: Exec,
) -> Result<PredictionTable, StressError> {
    check_supported(adapter, findings)?;
    let loaded = exec.map(items, |it| load_gray(Path::new(&it.image_path)));
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (it, img) in items.iter().zip(loaded) {
        match img {
            Ok(img) => ok.push((it.clone(), img)),
            Err(e) => failures.push(PredictionFailure {
                scan_id: it.scan_id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    let mut table = predict_images(adapter, &ok, findings, exec)?;
    table.failures.extend(failures);
    Ok(table)
}

/// Per-finding reference distributions for percentile conversion.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    pub findings: Vec<FindingKey>,
    refs: Vec<PercentileReference>,
}

impl ReferenceSet {
    /// Uses every row of `table` whatever its source.
    pub fn from_table(table: &PredictionTable) -> Result<Self, StressError> {
        let refs = (0..table.findings.len())
            .map(|c| {
                let col: Vec<f64> = table.rows.iter().map(|r| r.probabilities[c]).collect();
                PercentileReference::new(&col)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ReferenceSet {
            findings: table.findings.clone(),
            refs,
        })
    }

    pub fn percentile(&self, finding: &str, p: f64) -> Result<f64, StressError> {
        let i = self
            .findings
            .iter()
            .position(|f| f.as_str() == finding)
            .ok_or_else(|| StressError::MissingReference(finding.to_string()))?;
        Ok(self.refs[i].percentile(p))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileChangeMatrix {
    /// Added pathology.
    pub rows: Vec<FindingKey>,
    /// Predicted finding.
    pub cols: Vec<FindingKey>,
    /// Median percentile change; NaN where no patient contributes.
    pub values: Vec<Vec<f64>>,
    pub counts: Vec<Vec<usize>>,
    /// Patients dropped from each row for lack of a counterfactual.
    pub excluded: Vec<usize>,
}

impl PercentileChangeMatrix {
    pub fn get(&self, row: &str, col: &str) -> Option<f64> {
        let r = self.rows.iter().position(|k| k.as_str() == row)?;
        let c = self.cols.iter().position(|k| k.as_str() == col)?;
        Some(self.values[r][c])
    }

    /// Header `added,n,excluded,<cols>`; `n` is the row's pair count.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), StressError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["added".to_string(), "n".into(), "excluded".into()];
        header.extend(self.cols.iter().map(|c| c.to_string()));
        out.write_record(&header)?;
        for (r, key) in self.rows.iter().enumerate() {
            let n = self.counts[r].iter().copied().max().unwrap_or(0);
            let mut rec = vec![key.to_string(), n.to_string(), self.excluded[r].to_string()];
            rec.extend(self.values[r].iter().map(|v| fmt_cell(*v)));
            out.write_record(&rec)?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, StressError> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        if header.len() < 3 || &header[0] != "added" {
            return Err(StressError::Argument("not a change-matrix CSV".into()));
        }
        let cols: Vec<FindingKey> = header.iter().skip(3).map(FindingKey::new).collect();
        let mut m = PercentileChangeMatrix {
            rows: vec![],
            cols,
            values: vec![],
            counts: vec![],
            excluded: vec![],
        };
        for rec in rd.records() {
            let rec = rec?;
            let num = |s: &str| s.parse::<usize>().map_err(|_| StressError::Argument(format!("bad count {s:?}")));
            m.rows.push(FindingKey::new(&rec[0]));
            let n = num(&rec[1])?;
            m.excluded.push(num(&rec[2])?);
            let vals: Vec<f64> = rec
                .iter()
                .skip(3)
                .map(|s| if s.is_empty() { Ok(f64::NAN) } else { s.parse().map_err(|_| StressError::Argument(format!("bad value {s:?}"))) })
                .collect::<Result<_, _>>()?;
            m.counts.push(vals.iter().map(|v| if v.is_nan() { 0 } else { n }).collect());
            m.values.push(vals);
        }
        Ok(m)
    }
}

/// Per-patient percentile changes for one (added, predicted) cell, in
/// patient-key order. Replicate edits of one patient are averaged.
pub fn patient_changes(
    table: &PredictionTable,
    reference: &ReferenceSet,
    added: &str,
    predicted: &str,
) -> Result<Vec<(String, f64)>, StressError> {
    let c = table
        .column(predicted)
        .ok_or_else(|| StressError::Argument(format!("{predicted} not in prediction table")))?;
    let mut baseline: HashMap<&str, f64> = HashMap::new();
    for r in table.rows.iter().filter(|r| r.item.source == Source::Baseline) {
        baseline.insert(&r.item.patient_key, reference.percentile(predicted, r.probabilities[c])?);
    }
    let mut edits: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in table.rows.iter().filter(|r| {
        r.item.source == Source::Counterfactual && r.item.added_pathology.as_ref().is_some_and(|a| a.as_str() == added)
    }) {
        edits
            .entry(&r.item.patient_key)
            .or_default()
            .push(reference.percentile(predicted, r.probabilities[c])?);
    }
    Ok(edits
        .into_iter()
        .filter_map(|(k, v)| {
            let b = baseline.get(k)?;
            Some((k.to_string(), v.iter().sum::<f64>() / v.len() as f64 - b))
        })
        .collect())
}

/// `cell[p][f]` = median over patients of percentile_f(edit with p) minus
/// percentile_f(baseline).
pub fn change_matrix(
    table: &PredictionTable,
    reference: &ReferenceSet,
    added: &[FindingKey],
    predicted: &[FindingKey],
) -> Result<PercentileChangeMatrix, StressError> {
    let baseline_patients: Vec<&str> = table
        .rows
        .iter()
        .filter(|r| r.item.source == Source::Baseline)
        .map(|r| r.item.patient_key.as_str())
        .collect();
    let mut m = PercentileChangeMatrix {
        rows: added.to_vec(),
        cols: predicted.to_vec(),
        values: vec![],
        counts: vec![],
        excluded: vec![],
    };
    for p in added {
        let with_edit: std::collections::HashSet<&str> = table
            .rows
            .iter()
            .filter(|r| r.item.source == Source::Counterfactual && r.item.added_pathology.as_ref() == Some(p))
            .map(|r| r.item.patient_key.as_str())
            .collect();
        m.excluded
            .push(baseline_patients.iter().filter(|b| !with_edit.contains(*b)).count());
        let mut vals = vec![];
        let mut counts = vec![];
        for f in predicted {
            let changes: Vec<f64> = patient_changes(table, reference, p.as_str(), f.as_str())?
                .into_iter()
                .map(|(_, d)| d)
                .collect();
            counts.push(changes.len());
            vals.push(median(&changes).unwrap_or(f64::NAN));
        }
        m.values.push(vals);
        m.counts.push(counts);
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityReferenceRow {
    pub added: FindingKey,
    pub predicted: FindingKey,
    pub baseline_median: f64,
    pub modified_median: f64,
    /// Reader-read co-occurrence for (added, predicted); NaN if unavailable.
    pub read_cooccurrence: f64,
    pub n: usize,
}

/// Median raw probability on baselines vs edits next to the reader-read
/// co-occurrence used as reference standard.
pub fn probability_reference_report(
    table: &PredictionTable,
    added: &[FindingKey],
    predicted: &[FindingKey],
    cooccurrence: &CooccurrenceMatrix,
) -> Result<Vec<ProbabilityReferenceRow>, StressError> {
    let mut out = Vec::new();
    for p in added {
        let edits: Vec<&PredictionRow> = table
            .rows
            .iter()
            .filter(|r| r.item.source == Source::Counterfactual && r.item.added_pathology.as_ref() == Some(p))
            .collect();
        let patients: std::collections::HashSet<&str> = edits.iter().map(|r| r.item.patient_key.as_str()).collect();
        for f in predicted {
            let c = table
                .column(f.as_str())
                .ok_or_else(|| StressError::Argument(format!("{f} not in prediction table")))?;
            let base: Vec<f64> = table
                .rows
                .iter()
                .filter(|r| r.item.source == Source::Baseline && patients.contains(r.item.patient_key.as_str()))
                .map(|r| r.probabilities[c])
                .collect();
            let modified: Vec<f64> = edits.iter().map(|r| r.probabilities[c]).collect();
            out.push(ProbabilityReferenceRow {
                added: p.clone(),
                predicted: f.clone(),
                baseline_median: median(&base).unwrap_or(f64::NAN),
                modified_median: median(&modified).unwrap_or(f64::NAN),
                read_cooccurrence: cooccurrence.get(p.as_str(), f.as_str()).unwrap_or(f64::NAN),
                n: modified.len(),
            });
        }
    }
    Ok(out)
}

pub fn write_probability_report<W: Write>(w: W, rows: &[ProbabilityReferenceRow]) -> Result<(), StressError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["added", "predicted", "baseline_median", "modified_median", "read_cooccurrence", "n"])?;
    for r in rows {
        out.write_record([
            r.added.to_string(),
            r.predicted.to_string(),
            fmt_cell(r.baseline_median),
            fmt_cell(r.modified_median),
            fmt_cell(r.read_cooccurrence),
            r.n.to_string(),
        ])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}
