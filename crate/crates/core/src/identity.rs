//! Subject-identity preservation: pairwise Fréchet distance over
//! embeddings, the REAL / MODEL / CONTROL pairing protocol and summaries.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::Months;
use image::GrayImage;
use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::LabeledScan;
use crate::editor::{CounterfactualRecord, RecordKind};
use crate::exec::Exec;
use crate::findings::FindingKey;
use crate::hashing::{sha256_hex, stable_hash64, sub_seed};
use crate::imaging::{load_gray, resize_square, to_unit, ImageError};
use crate::stats::quantile;

#[derive(Debug, Error)]
pub enum IdentityError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("embedder {name}: {message}")]
    Embedder { name: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Fréchet distance between two singleton sets: the covariance terms
/// vanish, leaving the squared Euclidean distance.
pub fn pfid(a: &[f64], b: &[f64]) -> Result<f64, IdentityError> {
    if a.len() != b.len() {
        return Err(IdentityError::Argument(format!(
            "embedding dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EmbedderTag {
    pub name: String,
    pub dimension: usize,
}

/// Deterministic map from an image to a fixed-length vector.
pub trait Embedder: Sync {
    fn tag(&self) -> EmbedderTag;
    fn embed(&self, image: &GrayImage) -> Result<Vec<f64>, IdentityError>;
}

/// Fixed Gaussian random projection of downsampled pixels.
#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    pub side: u32,
    pub dimension: usize,
    pub seed: u64,
    projection: Vec<f64>,
}

impl ToyEmbedder {
    pub fn new(side: u32, dimension: usize, seed: u64) -> Self {
        let inputs = (side * side) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (inputs as f64).sqrt();
        let projection = (0..inputs * dimension)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        ToyEmbedder {
            side,
            dimension,
            seed,
            projection,
        }
    }
}

impl Default for ToyEmbedder {
    fn default() -> Self {
        ToyEmbedder::new(16, 64, 0)
    }
}

impl Embedder for ToyEmbedder {
    fn tag(&self) -> EmbedderTag {
        EmbedderTag {
            name: format!("toy-projection-{}x{}-s{}", self.side, self.side, self.seed),
            dimension: self.dimension,
        }
    }

    fn embed(&self, image: &GrayImage) -> Result<Vec<f64>, IdentityError> {
        let px = to_unit(&resize_square(image, self.side));
        let n = px.len();
        Ok((0..self.dimension)
            .map(|d| {
                self.projection[d * n..(d + 1) * n]
                    .iter()
                    .zip(&px)
                    .map(|(w, x)| w * *x as f64)
                    .sum()
            })
            .collect())
    }
}

/// Embeddings stored as little-endian f64 files named by the image
/// content hash, one directory per embedder.
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    pub dir: PathBuf,
}

impl EmbeddingCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        EmbeddingCache { dir: dir.into() }
    }

    fn path_for(&self, tag: &EmbedderTag, content_hash: &str) -> PathBuf {
        let key = format!("{}-{}", tag.name, tag.dimension);
        let safe: String = key
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
            .collect();
        self.dir.join(safe).join(format!("{content_hash}.bin"))
    }

    /// Embeds the file at `path`, reusing a cached vector for identical bytes.
    pub fn embed_file(&self, embedder: &dyn Embedder, path: &Path) -> Result<Vec<f64>, IdentityError> {
        let bytes = fs::read(path).map_err(|source| IdentityError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let tag = embedder.tag();
        let cached = self.path_for(&tag, &sha256_hex(&bytes));
        if let Ok(raw) = fs::read(&cached) {
            if raw.len() == tag.dimension * 8 {
                return Ok(raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect());
            }
            warn!("ignoring corrupt cache entry {}", cached.display());
        }
        let v = embed_file_uncached(embedder, path)?;
        if let Some(parent) = cached.parent() {
            let _ = fs::create_dir_all(parent);
        }
        let raw: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        // write then rename so concurrent readers never see a partial file
        let tmp = cached.with_extension(format!("tmp{}", std::process::id()));
        if fs::write(&tmp, raw).is_ok() {
            let _ = fs::rename(&tmp, &cached);
        }
        Ok(v)
    }
}

fn embed_file_uncached(embedder: &dyn Embedder, path: &Path) -> Result<Vec<f64>, IdentityError> {
    let v = embedder.embed(&load_gray(path)?)?;
    if v.len() != embedder.tag().dimension {
        return Err(IdentityError::Embedder {
            name: embedder.tag().name,
            message: format!("returned {} values, expected {}", v.len(), embedder.tag().dimension),
        });
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PairKind {
    Control,
    Model,
    Real,
}

impl PairKind {
    pub fn name(self) -> &'static str {
        match self {
            PairKind::Control => "CONTROL",
            PairKind::Model => "MODEL",
            PairKind::Real => "REAL",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub kind: PairKind,
    pub condition: FindingKey,
    pub baseline_id: String,
    pub baseline_patient: String,
    pub baseline_path: String,
    pub comparison_id: String,
    pub comparison_patient: String,
    pub comparison_path: String,
}

/// REAL pairs: a no-finding scan and a later same-patient scan carrying
/// `condition` within two calendar years. One pair per patient, drawn
/// under `seed` from candidates ordered by time gap then follow-up date.
pub fn real_pairs(scans: &[LabeledScan], condition: &FindingKey, seed: u64) -> Vec<Pair> {
    let mut by_patient: BTreeMap<&str, Vec<&LabeledScan>> = BTreeMap::new();
    let mut undated = 0usize;
    for s in scans {
        if s.scan.study_date.is_none() {
            undated += 1;
            continue;
        }
        by_patient.entry(&s.scan.patient_id).or_default().push(s);
    }
    if undated > 0 {
        warn!("{undated} scans without a study date cannot form REAL pairs");
    }
    let mut out = vec![];
    for (patient, list) in by_patient {
        let mut candidates = vec![];
        for b in list.iter().filter(|s| s.is_no_finding() == Some(true)) {
            let bd = b.scan.study_date.expect("dated");
            let limit = bd.checked_add_months(Months::new(24)).expect("date in range");
            for f in &list {
                let fd = f.scan.study_date.expect("dated");
                let carries = f
                    .study_label(condition.as_str())
                    .is_some_and(|v| v.uncertain_as_negative().is_present());
                if carries && fd > bd && fd <= limit {
                    candidates.push(((fd - bd).num_days(), fd, &b.scan, &f.scan));
                }
            }
        }
        if candidates.is_empty() {
            continue;
        }
        candidates.sort_by(|x, y| (x.0, x.1, &x.2.scan_id, &x.3.scan_id).cmp(&(y.0, y.1, &y.2.scan_id, &y.3.scan_id)));
        let pick = stable_hash64(&[&seed.to_le_bytes(), patient.as_bytes(), condition.as_str().as_bytes()]) as usize
            % candidates.len();
        let (_, _, b, f) = candidates[pick];
        out.push(Pair {
            kind: PairKind::Real,
            condition: condition.clone(),
            baseline_id: b.scan_id.clone(),
            baseline_patient: patient.to_string(),
            baseline_path: b.image_path.clone(),
            comparison_id: f.scan_id.clone(),
            comparison_patient: patient.to_string(),
            comparison_path: f.image_path.clone(),
        });
    }
    if out.is_empty() {
        warn!("no eligible REAL pairs for {condition}");
    }
    out
}

/// MODEL pairs: each successful edit prompted with `condition` against its
/// own baseline. `baseline_paths` maps source scan ids to images; baseline
/// records in `records` are added to it automatically.
pub fn model_pairs(
    records: &[CounterfactualRecord],
    baseline_paths: &HashMap<String, String>,
    condition: &FindingKey,
) -> Vec<Pair> {
    let mut paths = baseline_paths.clone();
    for r in records.iter().filter(|r| r.kind == RecordKind::Baseline && r.is_ok()) {
        paths.insert(r.output_id.clone(), r.output_path.clone());
    }
    let mut missing = 0usize;
    let mut out: Vec<Pair> = records
        .iter()
        .filter(|r| r.kind == RecordKind::Edit && r.is_ok() && r.prompt.pathology_key == *condition)
        .filter_map(|r| {
            let Some(bp) = paths.get(&r.source_scan_id) else {
                missing += 1;
                return None;
            };
            Some(Pair {
                kind: PairKind::Model,
                condition: condition.clone(),
                baseline_id: r.source_scan_id.clone(),
                baseline_patient: r.source_patient_id.clone(),
                baseline_path: bp.clone(),
                comparison_id: r.output_id.clone(),
                comparison_patient: r.source_patient_id.clone(),
                comparison_path: r.output_path.clone(),
            })
        })
        .collect();
    if missing > 0 {
        warn!("{missing} edits for {condition} have no baseline image");
    }
    out.sort_by(|a, b| (&a.baseline_id, &a.comparison_id).cmp(&(&b.baseline_id, &b.comparison_id)));
    out
}

/// CONTROL pairs: the MODEL pairs with counterfactuals reassigned so that
/// no baseline meets an edit of its own patient.
pub fn control_pairs(model: &[Pair], seed: u64) -> Vec<Pair> {
    let n = model.len();
    if n < 2 {
        if n == 1 {
            warn!("a single MODEL pair cannot be deranged");
        }
        return vec![];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "control"));
    let mut perm: Vec<usize> = (0..n).collect();
    for _ in 0..10_000 {
        perm.shuffle(&mut rng);
        if perm
            .iter()
            .enumerate()
            .all(|(i, &j)| model[i].baseline_patient != model[j].comparison_patient)
        {
            return perm
                .iter()
                .enumerate()
                .map(|(i, &j)| Pair {
                    kind: PairKind::Control,
                    comparison_id: model[j].comparison_id.clone(),
                    comparison_patient: model[j].comparison_patient.clone(),
                    comparison_path: model[j].comparison_path.clone(),
                    ..model[i].clone()
                })
                .collect();
        }
    }
    warn!("no patient-level derangement found for {}", model[0].condition);
    vec![]
}

/// Inputs for [`build_pairings`]; REAL needs `scans`, MODEL and CONTROL
/// need `records` and baseline images.
#[derive(Debug, Clone, Copy)]
pub struct PairingInputs<'a> {
    pub scans: &'a [LabeledScan],
    pub records: &'a [CounterfactualRecord],
    pub baseline_paths: &'a HashMap<String, String>,
}

pub fn build_pairings(inputs: PairingInputs, condition: &FindingKey, kind: PairKind, seed: u64) -> Vec<Pair> {
    match kind {
        PairKind::Real => real_pairs(inputs.scans, condition, seed),
        PairKind::Model => model_pairs(inputs.records, inputs.baseline_paths, condition),
        PairKind::Control => control_pairs(&model_pairs(inputs.records, inputs.baseline_paths, condition), seed),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub kind: PairKind,
    pub condition: FindingKey,
    pub baseline_id: String,
    pub comparison_id: String,
    pub embedder: EmbedderTag,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub kind: PairKind,
    pub condition: FindingKey,
    pub embedder: EmbedderTag,
    pub n: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub baseline_id: String,
    pub comparison_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub scores: Vec<PairScore>,
    pub summaries: Vec<PairSummary>,
    pub skipped: Vec<SkippedPair>,
}

/// Summary per (kind, condition, embedder), in key order.
pub fn summarize(scores: &[PairScore]) -> Vec<PairSummary> {
    let mut groups: BTreeMap<(PairKind, &FindingKey, &EmbedderTag), Vec<f64>> = BTreeMap::new();
    for s in scores {
        groups.entry((s.kind, &s.condition, &s.embedder)).or_default().push(s.value);
    }
    groups
        .into_iter()
        .map(|((kind, condition, embedder), v)| {
            let q1 = quantile(&v, 0.25).expect("nonempty");
            let q3 = quantile(&v, 0.75).expect("nonempty");
            PairSummary {
                kind,
                condition: condition.clone(),
                embedder: embedder.clone(),
                n: v.len(),
                median: quantile(&v, 0.5).expect("nonempty"),
                q1,
                q3,
                iqr: q3 - q1,
            }
        })
        .collect()
}

/// Embeds every distinct image once (in parallel), then scores pairs in
/// order. Pairs with an unloadable image are skipped and reported.
pub fn score_pairings(
    pairs: &[Pair],
    embedder: &dyn Embedder,
    cache: Option<&EmbeddingCache>,
    exec: Exec,
) -> ScoreReport {
    let mut paths: Vec<&str> = pairs
        .iter()
        .flat_map(|p| [p.baseline_path.as_str(), p.comparison_path.as_str()])
        .collect();
    paths.sort_unstable();
    paths.dedup();
    let embedded = exec.map(&paths, |p| match cache {
        Some(c) => c.embed_file(embedder, Path::new(p)),
        None => embed_file_uncached(embedder, Path::new(p)),
    });
    let lookup: HashMap<&str, &Result<Vec<f64>, IdentityError>> = paths.iter().copied().zip(&embedded).collect();
    let tag = embedder.tag();
    let mut report = ScoreReport {
        scores: vec![],
        summaries: vec![],
        skipped: vec![],
    };
    for p in pairs {
        let value = match (lookup[p.baseline_path.as_str()], lookup[p.comparison_path.as_str()]) {
            (Ok(a), Ok(b)) => pfid(a, b).map_err(|e| e.to_string()),
            (Err(e), _) | (_, Err(e)) => Err(e.to_string()),
        };
        match value {
            Ok(value) => report.scores.push(PairScore {
                kind: p.kind,
                condition: p.condition.clone(),
                baseline_id: p.baseline_id.clone(),
                comparison_id: p.comparison_id.clone(),
                embedder: tag.clone(),
                value,
            }),
            Err(reason) => report.skipped.push(SkippedPair {
                baseline_id: p.baseline_id.clone(),
                comparison_id: p.comparison_id.clone(),
                reason,
            }),
        }
    }
    if !report.skipped.is_empty() {
        warn!("{} pairs skipped for unloadable images", report.skipped.len());
    }
    report.summaries = summarize(&report.scores);
    report
}

pub fn write_scores_csv<W: Write>(w: W, scores: &[PairScore]) -> Result<(), IdentityError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["kind", "condition", "embedder", "dimension", "baseline_id", "comparison_id", "pfid"])?;
    for s in scores {
        out.write_record([
            s.kind.name(),
            s.condition.as_str(),
            &s.embedder.name,
            &s.embedder.dimension.to_string(),
            &s.baseline_id,
            &s.comparison_id,
            &s.value.to_string(),
        ])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// One row per (condition, embedder) with `median (q1-q3)` and N for each
/// pairing kind, blank where a kind has no pairs.
pub fn write_summary_table<W: Write>(w: W, summaries: &[PairSummary]) -> Result<(), IdentityError> {
    let mut out = csv::Writer::from_writer(w);
    let kinds = [PairKind::Control, PairKind::Model, PairKind::Real];
    let mut header = vec!["condition".to_string(), "embedder".into()];
    for k in kinds {
        header.push(format!("{} median (IQR)", k.name().to_lowercase()));
        header.push(format!("{} N", k.name().to_lowercase()));
    }
    out.write_record(&header)?;
    let mut rows: BTreeMap<(&FindingKey, &str), BTreeMap<PairKind, &PairSummary>> = BTreeMap::new();
    for s in summaries {
        rows.entry((&s.condition, &s.embedder.name)).or_default().insert(s.kind, s);
    }
    for ((cond, emb), cells) in rows {
        let mut rec = vec![cond.to_string(), emb.to_string()];
        for k in kinds {
            match cells.get(&k) {
                Some(s) => {
                    rec.push(format!("{:.2} ({:.2}-{:.2})", s.median, s.q1, s.q3));
                    rec.push(s.n.to_string());
                }
                None => rec.extend([String::new(), String::new()]),
            }
        }
        out.write_record(&rec)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{ScanRecord, Sex, View};
    use crate::findings::Cohort;
    use crate::imaging::save_png;
    use crate::labels::{LabelValue, LabelVector};
    use chrono::NaiveDate;

    #[test]
    fn pfid_basics() {
        assert_eq!(pfid(&[3.0, 0.0], &[0.0, 4.0]).unwrap(), 25.0);
        assert_eq!(pfid(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert!(matches!(pfid(&[1.0], &[1.0, 2.0]), Err(IdentityError::Argument(_))));
    }

    fn scan(id: &str, patient: &str, date: &str, findings: &[&str]) -> LabeledScan {
        let vocab = Cohort::Nih.vocabulary();
        let mut labels = LabelVector::absent(vocab.len());
        if findings.is_empty() {
            labels.set(&vocab, "no_finding", LabelValue::Present);
        }
        for f in findings {
            assert!(labels.set(&vocab, f, LabelValue::Present));
        }
        LabeledScan {
            scan: ScanRecord {
                scan_id: id.into(),
                patient_id: patient.into(),
                cohort: Cohort::Nih,
                view: View::Pa,
                age_years: 50.0,
                sex: Sex::M,
                image_path: format!("{id}.png"),
                study_date: Some(NaiveDate::parse_from_str(date, "%Y-%m-%d").unwrap()),
            },
            labels,
        }
    }

    #[test]
    fn real_pairs_one_per_patient_within_window() {
        let cardio = FindingKey::new("cardiomegaly");
        let scans = vec![
            scan("a0", "A", "2010-01-01", &[]),
            scan("a1", "A", "2010-06-01", &["cardiomegaly"]),
            scan("a2", "A", "2011-01-01", &["cardiomegaly"]),
            scan("a3", "A", "2011-12-31", &["cardiomegaly"]),
            scan("b0", "B", "2010-01-01", &[]),
            scan("b1", "B", "2012-01-02", &["cardiomegaly"]),
            scan("c0", "C", "2010-01-01", &["cardiomegaly"]),
            scan("c1", "C", "2010-02-01", &[]),
        ];
        let pairs = real_pairs(&scans, &cardio, 3);
        assert_eq!(pairs.len(), 1, "B is outside two years; C's finding precedes its baseline");
        assert_eq!(pairs[0].baseline_id, "a0");
        assert!(["a1", "a2", "a3"].contains(&pairs[0].comparison_id.as_str()));
        assert_eq!(pairs, real_pairs(&scans, &cardio, 3));
        let picks: std::collections::BTreeSet<String> =
            (0..40).map(|s| real_pairs(&scans, &cardio, s)[0].comparison_id.clone()).collect();
        assert!(picks.len() > 1, "the draw depends on the seed");
        assert!(real_pairs(&scans, &FindingKey::new("hernia"), 0).is_empty());
    }

    fn edit(id: &str, patient: &str, key: &str) -> CounterfactualRecord {
        CounterfactualRecord {
            output_id: id.into(),
            kind: RecordKind::Edit,
            source_scan_id: format!("src-{patient}"),
            source_patient_id: patient.into(),
            prompt: crate::editor::PromptSpec {
                pathology_key: key.into(),
                prompt_text: key.into(),
                status: crate::editor::PromptStatus::Final,
            },
            params: Default::default(),
            seed: 0,
            replicate: 0,
            run_seed: 0,
            output_path: format!("{id}.png"),
            backend: crate::editor::BackendDescriptor::mock(),
            status: crate::editor::RecordStatus::Ok,
        }
    }

    #[test]
    fn model_and_control_pairs() {
        let cond = FindingKey::new("edema");
        let records: Vec<_> = (0..5)
            .map(|i| edit(&format!("e{i}"), &format!("P{i}"), "edema"))
            .chain([edit("x", "P0", "hernia")])
            .collect();
        let paths: HashMap<String, String> = (0..5).map(|i| (format!("src-P{i}"), format!("src{i}.png"))).collect();
        let inputs = PairingInputs {
            scans: &[],
            records: &records,
            baseline_paths: &paths,
        };
        let model = build_pairings(inputs, &cond, PairKind::Model, 0);
        assert_eq!(model.len(), 5);
        assert!(model.iter().all(|p| p.baseline_patient == p.comparison_patient));
        for seed in 0..20 {
            let control = build_pairings(inputs, &cond, PairKind::Control, seed);
            assert_eq!(control.len(), 5);
            assert!(control.iter().all(|p| p.baseline_patient != p.comparison_patient));
            let mut cmp: Vec<&str> = control.iter().map(|p| p.comparison_id.as_str()).collect();
            cmp.sort();
            assert_eq!(cmp, vec!["e0", "e1", "e2", "e3", "e4"]);
        }
        assert!(control_pairs(&model[..1], 0).is_empty());
    }

    /// Embeds to the first two pixel values of a 2x1 image.
    struct PixelEmbedder;
    impl Embedder for PixelEmbedder {
        fn tag(&self) -> EmbedderTag {
            EmbedderTag {
                name: "pixels".into(),
                dimension: 2,
            }
        }
        fn embed(&self, img: &GrayImage) -> Result<Vec<f64>, IdentityError> {
            Ok(vec![img.get_pixel(0, 0)[0] as f64, img.get_pixel(1, 0)[0] as f64])
        }
    }

    #[test]
    fn scoring_matches_hand_computation() {
        let tmp = tempfile::tempdir().unwrap();
        let write = |name: &str, a: u8, b: u8| {
            let p = tmp.path().join(name);
            save_png(&GrayImage::from_raw(2, 1, vec![a, b]).unwrap(), &p).unwrap();
            p.display().to_string()
        };
        // hand values: (0,0)-(3,4)=25, (0,0)-(1,1)=2, (0,0)-(6,8)=100, (0,0)-(0,2)=4, (0,0)-(5,0)=25
        let base = write("base.png", 0, 0);
        let others = [(3, 4), (1, 1), (6, 8), (0, 2), (5, 0)];
        let pairs: Vec<Pair> = others
            .iter()
            .enumerate()
            .map(|(i, (a, b))| Pair {
                kind: PairKind::Model,
                condition: "edema".into(),
                baseline_id: "base".into(),
                baseline_patient: "P".into(),
                baseline_path: base.clone(),
                comparison_id: format!("c{i}"),
                comparison_patient: "P".into(),
                comparison_path: write(&format!("c{i}.png"), *a, *b),
            })
            .collect();
        let cache = EmbeddingCache::new(tmp.path().join("cache"));
        let mut with_missing = pairs.clone();
        with_missing.push(Pair {
            comparison_path: "/nonexistent.png".into(),
            ..pairs[0].clone()
        });
        let r = score_pairings(&with_missing, &PixelEmbedder, Some(&cache), Exec::Parallel);
        let values: Vec<f64> = r.scores.iter().map(|s| s.value).collect();
        assert_eq!(values, vec![25.0, 2.0, 100.0, 4.0, 25.0]);
        assert_eq!(r.skipped.len(), 1);
        assert_eq!(r.summaries.len(), 1);
        assert_eq!(r.summaries[0].median, 25.0);
        assert_eq!(r.summaries[0].n, 5);
        // cached second pass is identical and permutation does not move the median
        let mut rev = pairs.clone();
        rev.reverse();
        let r2 = score_pairings(&rev, &PixelEmbedder, Some(&cache), Exec::Sequential);
        assert_eq!(r2.summaries[0].median, 25.0);
        assert_eq!(r2.summaries[0].iqr, r.summaries[0].iqr);

        let same: Vec<Pair> = pairs
            .iter()
            .map(|p| Pair {
                comparison_path: base.clone(),
                ..p.clone()
            })
            .collect();
        let z = score_pairings(&same, &ToyEmbedder::default(), None, Exec::Sequential);
        assert_eq!((z.summaries[0].median, z.summaries[0].iqr), (0.0, 0.0));

        let mut buf = vec![];
        write_summary_table(&mut buf, &r.summaries).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("edema,pixels,,,25.00 (4.00-25.00),5,,"), "{text}");
    }

    #[test]
    fn toy_embedder_is_deterministic() {
        let img = GrayImage::from_fn(32, 32, |x, y| image::Luma([((x * 7 + y * 3) % 256) as u8]));
        let e = ToyEmbedder::default();
        assert_eq!(e.embed(&img).unwrap(), ToyEmbedder::default().embed(&img).unwrap());
        assert_eq!(e.embed(&img).unwrap().len(), 64);
    }
}
