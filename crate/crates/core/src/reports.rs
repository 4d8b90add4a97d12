//! Heatmaps and tables for run artifacts, and manifest validation.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::editor::{meta_path_for, replay_identity, CounterfactualRecord, ManifestMeta, MANIFEST_SCHEMA_VERSION};
use crate::hashing::sha256_hex;
use crate::matrix::CooccurrenceMatrix;
use crate::stress::PercentileChangeMatrix;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("no renderable artifacts under {dir}; looked for: {}", missing.join(", "))]
    NothingToRender { dir: String, missing: Vec<String> },
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Changes smaller than this (in percentile points) render as blank.
pub const BLANK_BELOW: f64 = 1.0;

const CELL: u32 = 24;
const GRID: Rgb<u8> = Rgb([160, 160, 160]);
const UNDEFINED: Rgb<u8> = Rgb([215, 215, 215]);
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

fn ramp(t: f64, positive: bool) -> Rgb<u8> {
    let fade = (255.0 * (1.0 - t.clamp(0.0, 1.0))).round() as u8;
    if positive {
        Rgb([fade, fade, 255])
    } else {
        Rgb([255, fade, fade])
    }
}

/// Blue for increases, red for decreases, saturating at 50 points; blank
/// below [`BLANK_BELOW`].
pub fn change_color(v: f64) -> Rgb<u8> {
    if v.is_nan() {
        UNDEFINED
    } else if v.abs() < BLANK_BELOW {
        WHITE
    } else {
        ramp(v.abs() / 50.0, v > 0.0)
    }
}

pub fn fraction_color(v: f64) -> Rgb<u8> {
    if v.is_nan() {
        UNDEFINED
    } else {
        ramp(v, true)
    }
}

/// One `CELL`-sized square per value with 1 px grid lines.
pub fn heatmap(values: &[Vec<f64>], color: fn(f64) -> Rgb<u8>) -> RgbImage {
    let rows = values.len() as u32;
    let cols = values.first().map_or(0, |r| r.len()) as u32;
    let mut img = RgbImage::from_pixel(cols * CELL + 1, rows * CELL + 1, GRID);
    for (r, row) in values.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let fill = color(*v);
            for y in 1..CELL {
                for x in 1..CELL {
                    img.put_pixel(c as u32 * CELL + x, r as u32 * CELL + y, fill);
                }
            }
        }
    }
    img
}

/// Two heatmaps side by side with a white gutter.
pub fn side_by_side(left: &RgbImage, right: &RgbImage) -> RgbImage {
    let gap = CELL;
    let h = left.height().max(right.height());
    let mut img = RgbImage::from_pixel(left.width() + gap + right.width(), h, WHITE);
    image::imageops::replace(&mut img, left, 0, 0);
    image::imageops::replace(&mut img, right, (left.width() + gap) as i64, 0);
    img
}

/// Signed change table, one decimal, blank where |change| < 1 point.
pub fn write_change_table<W: Write>(w: W, m: &PercentileChangeMatrix) -> Result<(), ReportError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["added".to_string()];
    header.extend(m.cols.iter().map(|c| c.to_string()));
    out.write_record(&header)?;
    for (r, key) in m.rows.iter().enumerate() {
        let mut rec = vec![key.to_string()];
        rec.extend(m.values[r].iter().map(|v| {
            if v.is_nan() || v.abs() < BLANK_BELOW {
                String::new()
            } else {
                format!("{v:.1}")
            }
        }));
        out.write_record(&rec)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn walk(dir: &Path, skip: &Path, out: &mut Vec<PathBuf>) {
    let Ok(entries) = fs::read_dir(dir) else { return };
    let mut entries: Vec<PathBuf> = entries.flatten().map(|e| e.path()).collect();
    entries.sort();
    for p in entries {
        if p == skip {
            continue;
        }
        if p.is_dir() {
            walk(&p, skip, out);
        } else {
            out.push(p);
        }
    }
}

/// All files under `dir`, sorted, skipping `skip` (a subdirectory).
pub fn list_files(dir: &Path, skip: &Path) -> Vec<PathBuf> {
    let mut out = vec![];
    walk(dir, skip, &mut out);
    out
}

fn file_name(p: &Path) -> &str {
    p.file_name().and_then(|s| s.to_str()).unwrap_or("")
}

fn flat_name(run: &Path, p: &Path) -> String {
    let rel = p.strip_prefix(run).unwrap_or(p);
    let s = rel.with_extension("").display().to_string();
    s.replace(['/', '\\'], "__")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderReport {
    pub rendered: Vec<PathBuf>,
    pub missing: Vec<String>,
}

const CHANGE_PATTERN: &str = "*change_matrix.csv";
const COOC_PATTERN: &str = "read_cooccurrence.csv (paired with real_cooccurrence.csv when present)";
const PFID_PATTERN: &str = "pfid_summary.csv";
const AUC_PATTERN: &str = "auc*.csv";

/// Renders every known artifact under `run_dir` into `run_dir/reports`.
/// Missing artifact kinds are listed; an error when nothing is found.
pub fn render_reports(run_dir: &Path) -> Result<RenderReport, ReportError> {
    let out_dir = run_dir.join("reports");
    let files = list_files(run_dir, &out_dir);
    let mut rendered = vec![];
    let mut found = [false; 4];
    let parse = |p: &Path, m: String| ReportError::Parse {
        path: p.display().to_string(),
        message: m,
    };
    let mut outputs: Vec<(PathBuf, Vec<u8>)> = vec![];
    let mut images: Vec<(PathBuf, RgbImage)> = vec![];
    for p in &files {
        let name = file_name(p);
        let stem = flat_name(run_dir, p);
        if name.ends_with("change_matrix.csv") {
            found[0] = true;
            let m = PercentileChangeMatrix::read_csv(fs::File::open(p).map_err(io_err(p))?)
                .map_err(|e| parse(p, e.to_string()))?;
            let mut buf = vec![];
            write_change_table(&mut buf, &m)?;
            outputs.push((out_dir.join(format!("{stem}.table.csv")), buf));
            images.push((out_dir.join(format!("{stem}.png")), heatmap(&m.values, change_color)));
        } else if name == "read_cooccurrence.csv" {
            found[1] = true;
            let read = CooccurrenceMatrix::read_csv(fs::File::open(p).map_err(io_err(p))?)
                .map_err(|e| parse(p, e.to_string()))?;
            let mut img = heatmap(&read.fractions, fraction_color);
            let real_path = p.with_file_name("real_cooccurrence.csv");
            if real_path.exists() {
                let real = CooccurrenceMatrix::read_csv(fs::File::open(&real_path).map_err(io_err(&real_path))?)
                    .map_err(|e| parse(&real_path, e.to_string()))?;
                img = side_by_side(&img, &heatmap(&real.fractions, fraction_color));
            }
            images.push((out_dir.join(format!("{stem}.png")), img));
            outputs.push((out_dir.join(format!("{stem}.csv")), fs::read(p).map_err(io_err(p))?));
        } else if name == "pfid_summary.csv" {
            found[2] = true;
            outputs.push((out_dir.join(format!("{stem}.csv")), fs::read(p).map_err(io_err(p))?));
        } else if name.starts_with("auc") && name.ends_with(".csv") {
            found[3] = true;
            outputs.push((out_dir.join(format!("{stem}.csv")), fs::read(p).map_err(io_err(p))?));
        }
    }
    let missing: Vec<String> = [CHANGE_PATTERN, COOC_PATTERN, PFID_PATTERN, AUC_PATTERN]
        .iter()
        .zip(found)
        .filter(|(_, f)| !f)
        .map(|(p, _)| p.to_string())
        .collect();
    if found.iter().all(|f| !f) {
        return Err(ReportError::NothingToRender {
            dir: run_dir.display().to_string(),
            missing,
        });
    }
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    for (path, bytes) in outputs {
        fs::write(&path, bytes).map_err(io_err(&path))?;
        rendered.push(path);
    }
    for (path, img) in images {
        img.save(&path)?;
        rendered.push(path);
    }
    rendered.sort();
    Ok(RenderReport { rendered, missing })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    NoManifests,
    MissingBody,
    MetaParse,
    Schema,
    LineParse,
    Count,
    Failed,
    ContentHash,
    SeedReplay,
    DuplicateId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestIssue {
    pub manifest: String,
    pub line: Option<usize>,
    pub kind: IssueKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub manifest: String,
    pub records: usize,
    pub expected: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub manifests: Vec<ManifestSummary>,
    pub issues: Vec<ManifestIssue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Checks one manifest body against its metadata: line syntax, counts,
/// content hash, schema version, per-record seed replay and id uniqueness.
pub fn validate_manifest(body: &Path) -> (Option<ManifestSummary>, Vec<ManifestIssue>) {
    let name = body.display().to_string();
    let mut issues = vec![];
    let mut issue = |line: Option<usize>, kind: IssueKind, message: String| {
        issues.push(ManifestIssue {
            manifest: name.clone(),
            line,
            kind,
            message,
        })
    };
    let meta_path = meta_path_for(body);
    let meta: ManifestMeta = match fs::read_to_string(&meta_path)
        .map_err(|e| e.to_string())
        .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()))
    {
        Ok(m) => m,
        Err(e) => {
            issue(None, IssueKind::MetaParse, format!("{}: {e}", meta_path.display()));
            return (None, issues);
        }
    };
    if meta.schema_version != MANIFEST_SCHEMA_VERSION {
        issue(
            None,
            IssueKind::Schema,
            format!("schema version {} (expected {MANIFEST_SCHEMA_VERSION})", meta.schema_version),
        );
    }
    let bytes = match fs::read(body) {
        Ok(b) => b,
        Err(e) => {
            issue(None, IssueKind::MissingBody, e.to_string());
            return (None, issues);
        }
    };
    if sha256_hex(&bytes) != meta.content_hash {
        issue(None, IssueKind::ContentHash, "body does not match the recorded content hash".into());
    }
    let text = String::from_utf8_lossy(&bytes);
    let mut records = 0usize;
    let mut failed = 0usize;
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CounterfactualRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                issue(Some(i + 1), IssueKind::LineParse, e.to_string());
                continue;
            }
        };
        records += 1;
        failed += usize::from(!rec.is_ok());
        let (seed, id) = replay_identity(&rec, &meta.params);
        if rec.run_seed != meta.run_seed {
            issue(Some(i + 1), IssueKind::SeedReplay, format!("run seed {} differs from manifest {}", rec.run_seed, meta.run_seed));
        } else if seed != rec.seed || id != rec.output_id {
            issue(
                Some(i + 1),
                IssueKind::SeedReplay,
                format!("{}: recorded seed {} does not replay (expected {seed}, id {id})", rec.output_id, rec.seed),
            );
        }
        if !ids.insert(rec.output_id.clone()) {
            issue(Some(i + 1), IssueKind::DuplicateId, format!("duplicate output id {}", rec.output_id));
        }
    }
    if records != meta.records || records != meta.expected_records {
        issue(
            None,
            IssueKind::Count,
            format!("{records} records; metadata says {} written of {} expected", meta.records, meta.expected_records),
        );
    }
    if failed != meta.failed {
        issue(None, IssueKind::Failed, format!("{failed} failed records; metadata says {}", meta.failed));
    } else if failed > 0 {
        issue(None, IssueKind::Failed, format!("{failed} records failed generation"));
    }
    (
        Some(ManifestSummary {
            manifest: name,
            records,
            expected: meta.expected_records,
            failed,
        }),
        issues,
    )
}

/// Validates every `*.meta.json` manifest under `run_dir`.
pub fn validate_manifests(run_dir: &Path) -> ValidationReport {
    let mut report = ValidationReport {
        manifests: vec![],
        issues: vec![],
    };
    for p in list_files(run_dir, &run_dir.join("reports")) {
        let name = file_name(&p);
        if let Some(stem) = name.strip_suffix(".meta.json") {
            let body = p.with_file_name(format!("{stem}.jsonl"));
            let (summary, issues) = validate_manifest(&body);
            report.manifests.extend(summary);
            report.issues.extend(issues);
        }
    }
    if report.manifests.is_empty() && report.issues.is_empty() {
        report.issues.push(ManifestIssue {
            manifest: run_dir.display().to_string(),
            line: None,
            kind: IssueKind::NoManifests,
            message: "no manifests found".into(),
        });
    }
    report
}
