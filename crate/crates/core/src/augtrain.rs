//! Training multi-label classifiers on real plus counterfactual scans,
//! AUC evaluation and the small configuration sweep.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::GrayImage;
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::LabeledScan;
use crate::editor::{CounterfactualRecord, RecordKind};
use crate::exec::Exec;
use crate::findings::{study_findings, FindingKey};
use crate::hashing::{sha256_hex, sub_seed};
use crate::imaging::{load_gray, resize_square, to_unit, ImageError};
use crate::labels::{LabelValue, LabelVector};
use crate::matrix::{fmt_cell, CooccurrenceMatrix};
use crate::nn::{batch_loss_and_grad, Adam, ConvArch, ConvNet};
use crate::stats::roc_auc;
use crate::stress::{Classifier, StressError};

#[derive(Debug, Error)]
pub enum AugError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    NonFinite { epoch: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Stress(#[from] StressError),
    #[error("invalid artifact: {0}")]
    Artifact(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AugError + '_ {
    move |source| AugError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LabelingScheme {
    OffTargetAbsent,
    OffTargetMasked,
    OffTargetCooccurrence,
}

impl LabelingScheme {
    pub const ALL: [LabelingScheme; 3] = [
        LabelingScheme::OffTargetAbsent,
        LabelingScheme::OffTargetMasked,
        LabelingScheme::OffTargetCooccurrence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LabelingScheme::OffTargetAbsent => "OFF_TARGET_ABSENT",
            LabelingScheme::OffTargetMasked => "OFF_TARGET_MASKED",
            LabelingScheme::OffTargetCooccurrence => "OFF_TARGET_COOCCURRENCE",
        }
    }
}

/// Where a training image came from, which decides its target.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainSource<'a> {
    Real(&'a LabeledScan),
    Counterfactual { prompted: FindingKey },
    SyntheticBaseline,
}

/// Training target over `findings` (study keys).
///
/// Real scans keep their hard labels (masked where the cohort has no such
/// label). Edits get 1 for the prompted finding and, off target, 0, a mask
/// or the co-occurrence row value depending on the scheme. Synthetic
/// baselines are all zeros.
pub fn make_targets(
    source: &TrainSource,
    findings: &[FindingKey],
    scheme: LabelingScheme,
    matrix: Option<&CooccurrenceMatrix>,
) -> Result<LabelVector, AugError> {
    let values = match source {
        TrainSource::Real(scan) => findings
            .iter()
            .map(|f| match scan.study_label(f.as_str()) {
                Some(v) => v.uncertain_as_negative(),
                None => LabelValue::Masked,
            })
            .collect(),
        TrainSource::SyntheticBaseline => vec![LabelValue::Absent; findings.len()],
        TrainSource::Counterfactual { prompted } => {
            if !findings.contains(prompted) {
                return Err(AugError::Config(format!("prompted finding {prompted} is not a training finding")));
            }
            let row = match scheme {
                LabelingScheme::OffTargetCooccurrence => {
                    let m = matrix.ok_or_else(|| {
                        AugError::Config("co-occurrence scheme needs a co-occurrence matrix".into())
                    })?;
                    Some(m.row(prompted.as_str()).ok_or_else(|| {
                        AugError::Config(format!("co-occurrence matrix has no row for {prompted}"))
                    })?)
                }
                _ => None,
            };
            let mut out = Vec::with_capacity(findings.len());
            for f in findings {
                out.push(if f == prompted {
                    LabelValue::Present
                } else {
                    match scheme {
                        LabelingScheme::OffTargetAbsent => LabelValue::Absent,
                        LabelingScheme::OffTargetMasked => LabelValue::Masked,
                        LabelingScheme::OffTargetCooccurrence => {
                            let m = matrix.expect("checked above");
                            let c = m.col_keys.iter().position(|k| k == f).ok_or_else(|| {
                                AugError::Config(format!("co-occurrence matrix has no column for {f}"))
                            })?;
                            let v = row.expect("checked above")[c];
                            if !(0.0..=1.0).contains(&v) {
                                return Err(AugError::Config(format!(
                                    "co-occurrence cell {prompted}/{f} is undefined"
                                )));
                            }
                            LabelValue::Soft(v)
                        }
                    }
                });
            }
            out
        }
    };
    Ok(LabelVector { values })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Real,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainItem {
    pub id: String,
    pub patient_key: String,
    pub image_path: String,
    pub origin: Origin,
    pub targets: LabelVector,
}

impl TrainItem {
    pub fn target_values(&self) -> Vec<Option<f32>> {
        self.targets.values.iter().map(|v| v.target().map(|t| t as f32)).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    pub real: usize,
    pub synthetic_baselines: usize,
    pub synthetic_edits: usize,
    /// Edits whose prompt is outside the training findings, or failed.
    pub skipped_synthetic: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub findings: Vec<FindingKey>,
    pub scheme: LabelingScheme,
    pub seed: u64,
    pub items: Vec<TrainItem>,
    pub composition: Composition,
}

/// Real training scans plus synthetic records, shuffled under `seed`.
pub fn assemble_training_set(
    real: &[LabeledScan],
    synthetic: &[CounterfactualRecord],
    findings: &[FindingKey],
    scheme: LabelingScheme,
    matrix: Option<&CooccurrenceMatrix>,
    seed: u64,
) -> Result<TrainingSet, AugError> {
    if scheme == LabelingScheme::OffTargetCooccurrence {
        let m = matrix.ok_or_else(|| AugError::Config("co-occurrence scheme needs a matrix".into()))?;
        if !m.covers(findings) {
            return Err(AugError::Config("co-occurrence matrix does not cover all training findings".into()));
        }
    }
    let mut seen = HashSet::new();
    let mut items = Vec::with_capacity(real.len() + synthetic.len());
    let mut comp = Composition::default();
    for scan in real {
        if !seen.insert(scan.scan.scan_id.clone()) {
            return Err(AugError::Integrity(format!("duplicate scan id {}", scan.scan.scan_id)));
        }
        items.push(TrainItem {
            id: scan.scan.scan_id.clone(),
            patient_key: format!("real:{}", scan.scan.patient_id),
            image_path: scan.scan.image_path.clone(),
            origin: Origin::Real,
            targets: make_targets(&TrainSource::Real(scan), findings, scheme, matrix)?,
        });
        comp.real += 1;
    }
    for rec in synthetic {
        let source = match rec.kind {
            RecordKind::Baseline => TrainSource::SyntheticBaseline,
            RecordKind::Edit => TrainSource::Counterfactual {
                prompted: rec.prompt.pathology_key.clone(),
            },
        };
        if !rec.is_ok()
            || matches!(&source, TrainSource::Counterfactual { prompted } if !findings.contains(prompted))
        {
            comp.skipped_synthetic += 1;
            continue;
        }
        if !seen.insert(rec.output_id.clone()) {
            return Err(AugError::Integrity(format!(
                "synthetic id {} collides with another scan id",
                rec.output_id
            )));
        }
        match rec.kind {
            RecordKind::Baseline => comp.synthetic_baselines += 1,
            RecordKind::Edit => comp.synthetic_edits += 1,
        }
        items.push(TrainItem {
            id: rec.output_id.clone(),
            patient_key: format!("synthetic:{}", rec.source_patient_id),
            image_path: rec.output_path.clone(),
            origin: Origin::Synthetic,
            targets: make_targets(&source, findings, scheme, matrix)?,
        });
    }
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, "interleave")));
    comp.total = items.len();
    Ok(TrainingSet {
        findings: findings.to_vec(),
        scheme,
        seed,
        items,
        composition: comp,
    })
}

/// Holds out `round(fraction * patients)` training patients, seeded.
pub fn split_validation(items: &[TrainItem], fraction: f64, seed: u64) -> (Vec<TrainItem>, Vec<TrainItem>) {
    let mut patients: Vec<&str> = items
        .iter()
        .map(|i| i.patient_key.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, "validation")));
    let n_val = (patients.len() as f64 * fraction.clamp(0.0, 1.0)).round() as usize;
    let val: HashSet<&str> = patients[..n_val].iter().copied().collect();
    let (v, t): (Vec<TrainItem>, Vec<TrainItem>) =
        items.iter().cloned().partition(|i| val.contains(i.patient_key.as_str()));
    (t, v)
}

/// Share of synthetic baseline patients used for training; the rest is
/// held out for testing.
pub const SYNTHETIC_TRAIN_FRACTION: f64 = 0.8;

/// Splits a synthetic cohort into (train, test) by baseline patient, so a
/// baseline and all its edits land on the same side. Seeded; record order
/// within each side is preserved.
pub fn partition_synthetic(
    records: &[CounterfactualRecord],
    train_fraction: f64,
    seed: u64,
) -> (Vec<CounterfactualRecord>, Vec<CounterfactualRecord>) {
    let mut patients: Vec<&str> = records
        .iter()
        .map(|r| r.source_patient_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, "synthetic-holdout")));
    let n_train = (patients.len() as f64 * train_fraction.clamp(0.0, 1.0)).round() as usize;
    let train: HashSet<&str> = patients[..n_train].iter().copied().collect();
    records
        .iter()
        .cloned()
        .partition(|r| train.contains(r.source_patient_id.as_str()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub findings: Vec<FindingKey>,
    #[serde(default)]
    pub real_manifest: Option<PathBuf>,
    #[serde(default)]
    pub synthetic_manifest: Option<PathBuf>,
    pub scheme: LabelingScheme,
    pub seed: u64,
    pub validation_fraction: f64,
    pub input_size: usize,
    pub channels: Vec<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-4,
            epochs: 100,
            batch_size: 32,
            early_stop_patience: 50,
            findings: study_findings(),
            real_manifest: None,
            synthetic_manifest: None,
            scheme: LabelingScheme::OffTargetCooccurrence,
            seed: 0,
            validation_fraction: 0.1,
            input_size: 32,
            channels: vec![8, 16],
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), AugError> {
        if self.early_stop_patience > self.epochs {
            return Err(AugError::Config("early_stop_patience exceeds epochs".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.findings.is_empty() {
            return Err(AugError::Config("epochs, batch_size and findings must be nonempty".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(AugError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn arch(&self) -> ConvArch {
        ConvArch {
            input_size: self.input_size,
            channels: self.channels.clone(),
            outputs: self.findings.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mean_auc: Option<f64>,
    pub val_auc: Vec<Option<f64>>,
    #[serde(default)]
    pub val_loss: Option<f64>,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stop_epoch: usize,
    pub stopped_early: bool,
    pub train_items: usize,
    pub val_items: usize,
    pub notes: Vec<String>,
}

impl TrainingLog {
    /// One JSON object per epoch, then a summary line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.epochs {
            writeln!(w, "{}", serde_json::to_string(e).expect("serializable"))?;
        }
        let summary = serde_json::json!({
            "summary": {
                "best_epoch": self.best_epoch,
                "stop_epoch": self.stop_epoch,
                "stopped_early": self.stopped_early,
                "train_items": self.train_items,
                "val_items": self.val_items,
                "notes": self.notes,
            }
        });
        writeln!(w, "{summary}")
    }
}

pub const ARCHITECTURE_ID: &str = "small-convnet-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub architecture: String,
    pub arch: ConvArch,
    pub findings: Vec<FindingKey>,
    pub input_size: u32,
    pub params_sha256: String,
}

/// A trained network usable as a [`Classifier`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub name: String,
    pub findings: Vec<FindingKey>,
    pub net: ConvNet,
}

fn params_bytes(params: &[f32]) -> Vec<u8> {
    params.iter().flat_map(|p| p.to_le_bytes()).collect()
}

impl TrainedModel {
    pub fn descriptor(&self) -> ModelDescriptor {
        ModelDescriptor {
            architecture: ARCHITECTURE_ID.into(),
            arch: self.net.arch.clone(),
            findings: self.findings.clone(),
            input_size: self.net.arch.input_size as u32,
            params_sha256: sha256_hex(&params_bytes(&self.net.params)),
        }
    }

    /// Writes `model.json` (descriptor) and `model.bin` (little-endian f32).
    pub fn save(&self, dir: &Path) -> Result<(), AugError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let bin = dir.join("model.bin");
        fs::write(&bin, params_bytes(&self.net.params)).map_err(io_err(&bin))?;
        let desc = dir.join("model.json");
        fs::write(&desc, serde_json::to_string_pretty(&self.descriptor()).expect("serializable"))
            .map_err(io_err(&desc))?;
        Ok(())
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self, AugError> {
        let desc_path = dir.join("model.json");
        let desc: ModelDescriptor = serde_json::from_str(&fs::read_to_string(&desc_path).map_err(io_err(&desc_path))?)
            .map_err(|e| AugError::Artifact(e.to_string()))?;
        if desc.architecture != ARCHITECTURE_ID {
            return Err(AugError::Artifact(format!("unknown architecture {}", desc.architecture)));
        }
        let bin_path = dir.join("model.bin");
        let bytes = fs::read(&bin_path).map_err(io_err(&bin_path))?;
        if sha256_hex(&bytes) != desc.params_sha256 {
            return Err(AugError::Artifact("parameter checksum mismatch".into()));
        }
        let params: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if params.len() != desc.arch.param_count() {
            return Err(AugError::Artifact("parameter count does not match architecture".into()));
        }
        Ok(TrainedModel {
            name: name.to_string(),
            findings: desc.findings,
            net: ConvNet { arch: desc.arch, params },
        })
    }
}

impl Classifier for TrainedModel {
    fn name(&self) -> &str {
        &self.name
    }
    fn findings(&self) -> &[FindingKey] {
        &self.findings
    }
    fn input_size(&self) -> u32 {
        self.net.arch.input_size as u32
    }
    fn predict(&self, image: &GrayImage) -> Result<Vec<f64>, StressError> {
        Ok(self.net.predict(&to_unit(image)))
    }
}

/// Loads every item's image at `size` as unit floats, in item order.
pub fn load_images(items: &[TrainItem], size: usize, exec: Exec) -> Result<Vec<Vec<f32>>, AugError> {
    exec.map(items, |it| {
        let img = load_gray(Path::new(&it.image_path))?;
        let img = if img.width() as usize == size && img.height() as usize == size {
            img
        } else {
            resize_square(&img, size as u32)
        };
        Ok(to_unit(&img))
    })
    .into_iter()
    .collect()
}

/// Per-finding AUC over items whose target is hard (exactly 0 or 1).
pub fn hard_target_auc(net: &ConvNet, items: &[TrainItem], images: &[Vec<f32>], n_findings: usize, exec: Exec) -> Vec<Option<f64>> {
    let preds = exec.map(images, |img| net.logits(img));
    (0..n_findings)
        .map(|f| {
            let mut scores = vec![];
            let mut labels = vec![];
            for (it, p) in items.iter().zip(&preds) {
                match it.targets.values[f] {
                    LabelValue::Present => labels.push(true),
                    LabelValue::Absent => labels.push(false),
                    _ => continue,
                }
                scores.push(p[f] as f64);
            }
            roc_auc(&scores, &labels).ok().flatten()
        })
        .collect()
}

/// Mean binary cross-entropy over every defined target; `None` if none are.
pub fn validation_loss(net: &ConvNet, items: &[TrainItem], images: &[Vec<f32>], exec: Exec) -> Option<f64> {
    let preds = exec.map(images, |img| net.logits(img));
    let (mut sum, mut n) = (0.0, 0usize);
    for (it, logits) in items.iter().zip(&preds) {
        for (t, &x) in it.target_values().iter().zip(logits) {
            if let Some(t) = t {
                let x = x as f64;
                sum += x.max(0.0) - x * *t as f64 + (-x.abs()).exp().ln_1p();
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

fn mean_defined(xs: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = xs.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Mini-batch Adam on per-finding BCE with hard, soft and masked targets.
/// Keeps the parameters of the best validation epoch (mean AUC over
/// findings) and stops after `early_stop_patience` epochs without
/// improvement.
pub fn train(
    config: &TrainingConfig,
    train_items: &[TrainItem],
    train_images: &[Vec<f32>],
    val_items: &[TrainItem],
    val_images: &[Vec<f32>],
    exec: Exec,
) -> Result<(TrainedModel, TrainingLog), AugError> {
    config.validate()?;
    if train_items.is_empty() {
        return Err(AugError::Config("empty training set".into()));
    }
    let nf = config.findings.len();
    if train_items.iter().chain(val_items).any(|i| i.targets.values.len() != nf) {
        return Err(AugError::Config("target length does not match findings".into()));
    }
    let mut net = ConvNet::new(config.arch(), sub_seed(config.seed, "init"));
    let mut opt = Adam::new(net.params.len(), config.learning_rate as f32);
    let targets: Vec<Vec<Option<f32>>> = train_items.iter().map(TrainItem::target_values).collect();

    let mut best: Option<(f64, usize, Vec<f32>)> = None;
    let mut since = 0;
    let mut log = TrainingLog {
        epochs: vec![],
        best_epoch: 0,
        stop_epoch: 0,
        stopped_early: false,
        train_items: train_items.len(),
        val_items: val_items.len(),
        notes: vec![
            format!(
                "validation: {:.0}% of training patients, patient-level, seeded",
                config.validation_fraction * 100.0
            ),
            "early stopping metric: mean validation AUC over findings".into(),
            "no learning-rate schedule, no image augmentation".into(),
            format!("optimizer: Adam, lr {}", config.learning_rate),
        ],
    };
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(config.seed, &format!("epoch-{epoch}"))));
        let (mut loss_sum, mut count_sum) = (0.0, 0usize);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let imgs: Vec<&[f32]> = batch.iter().map(|&i| train_images[i].as_slice()).collect();
            let ts: Vec<&[Option<f32>]> = batch.iter().map(|&i| targets[i].as_slice()).collect();
            let (loss, mut grad, count) = batch_loss_and_grad(&net, &imgs, &ts, exec);
            if !loss.is_finite() {
                return Err(AugError::NonFinite { epoch, batch: b, loss });
            }
            if count == 0 {
                continue;
            }
            let scale = 1.0 / count as f32;
            grad.iter_mut().for_each(|g| *g *= scale);
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(AugError::NonFinite { epoch, batch: b, loss });
            }
            opt.step(&mut net.params, &grad);
            loss_sum += loss;
            count_sum += count;
        }
        let train_loss = loss_sum / count_sum.max(1) as f64;
        let (val_auc, val_loss) = if val_items.is_empty() {
            (vec![None; nf], None)
        } else {
            (
                hard_target_auc(&net, val_items, val_images, nf, exec),
                validation_loss(&net, val_items, val_images, exec),
            )
        };
        // without a usable validation signal, fall back to training loss
        let metric = mean_defined(&val_auc).unwrap_or(-train_loss);
        let improved = best.as_ref().is_none_or(|(m, _, _)| metric > *m);
        if improved {
            best = Some((metric, epoch, net.params.clone()));
            since = 0;
        } else {
            since += 1;
        }
        info!("epoch {epoch}: loss {train_loss:.4}, val mean AUC {:?}", mean_defined(&val_auc));
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_mean_auc: mean_defined(&val_auc),
            val_auc,
            val_loss,
            improved,
        });
        log.stop_epoch = epoch;
        if since > 0 && since >= config.early_stop_patience {
            log.stopped_early = epoch < config.epochs;
            break;
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    log.best_epoch = best_epoch;
    net.params = params;
    Ok((
        TrainedModel {
            name: format!("trained-{}", config.scheme.name().to_ascii_lowercase()),
            findings: config.findings.clone(),
            net,
        },
        log,
    ))
}

/// One row of an AUC table; `None` cells carry a note.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucRow {
    pub label: String,
    pub auc: Vec<Option<f64>>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucTable {
    pub findings: Vec<FindingKey>,
    pub rows: Vec<AucRow>,
}

impl AucTable {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), AugError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["cohort".to_string()];
        header.extend(self.findings.iter().map(|f| f.to_string()));
        out.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.label.clone()];
            rec.extend(r.auc.iter().map(|a| a.map(|v| fmt_cell(v)).unwrap_or_default()));
            out.write_record(&rec)?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// AUC per finding from scores and optional labels (`None` = cohort has
/// no such label).
pub fn auc_row(label: &str, findings: &[FindingKey], scores: &[Vec<f64>], labels: &[Vec<Option<bool>>]) -> AucRow {
    let mut row = AucRow {
        label: label.to_string(),
        auc: vec![],
        positives: vec![],
        negatives: vec![],
        notes: BTreeMap::new(),
    };
    for (f, key) in findings.iter().enumerate() {
        let mut s = vec![];
        let mut l = vec![];
        for (sc, lb) in scores.iter().zip(labels) {
            if let Some(b) = lb[f] {
                s.push(sc[f]);
                l.push(b);
            }
        }
        let pos = l.iter().filter(|b| **b).count();
        row.positives.push(pos);
        row.negatives.push(l.len() - pos);
        if l.is_empty() {
            row.notes.insert(key.to_string(), "cohort has no label".into());
            row.auc.push(None);
            continue;
        }
        match roc_auc(&s, &l) {
            Ok(Some(a)) => row.auc.push(Some(a)),
            _ => {
                row.notes
                    .insert(key.to_string(), format!("single class ({pos} positive of {})", l.len()));
                row.auc.push(None);
            }
        }
    }
    row
}

/// Predicts a labeled cohort and computes its AUC row. Scans whose images
/// fail to load or predict are left out and noted.
pub fn evaluate_auc(
    adapter: &dyn Classifier,
    label: &str,
    scans: &[LabeledScan],
    findings: &[FindingKey],
    exec: Exec,
) -> Result<AucRow, AugError> {
    use crate::stress::{predict_cohort, PredictItem, Source};
    let items: Vec<PredictItem> = scans
        .iter()
        .map(|s| PredictItem {
            scan_id: s.scan.scan_id.clone(),
            image_path: s.scan.image_path.clone(),
            source: Source::Reference,
            patient_key: s.scan.patient_id.clone(),
            added_pathology: None,
        })
        .collect();
    let table = predict_cohort(adapter, &items, findings, exec)?;
    let by_id: BTreeMap<&str, &LabeledScan> = scans.iter().map(|s| (s.scan.scan_id.as_str(), s)).collect();
    let scores: Vec<Vec<f64>> = table.rows.iter().map(|r| r.probabilities.clone()).collect();
    let labels: Vec<Vec<Option<bool>>> = table
        .rows
        .iter()
        .map(|r| {
            let s = by_id[r.item.scan_id.as_str()];
            findings
                .iter()
                .map(|f| s.study_label(f.as_str()).map(|v| v.uncertain_as_negative().is_present()))
                .collect()
        })
        .collect();
    let mut row = auc_row(label, findings, &scores, &labels);
    if !table.failures.is_empty() {
        warn!("{label}: {} scans failed prediction", table.failures.len());
        row.notes
            .insert("_failures".into(), format!("{} scans failed prediction", table.failures.len()));
    }
    Ok(row)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    Single,
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub task_modes: Vec<TaskMode>,
    pub schemes: Vec<LabelingScheme>,
    pub n_synthetic: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            task_modes: vec![TaskMode::Single, TaskMode::Multi],
            schemes: LabelingScheme::ALL.to_vec(),
            n_synthetic: vec![2000, 5000],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub task_mode: TaskMode,
    pub scheme: LabelingScheme,
    pub n_synthetic: usize,
}

impl SweepCell {
    pub fn label(&self) -> String {
        format!(
            "{}-task/{}/{}",
            match self.task_mode {
                TaskMode::Single => "single",
                TaskMode::Multi => "multi",
            },
            self.scheme.name(),
            self.n_synthetic
        )
    }
}

impl SweepGrid {
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut out = vec![];
        for &task_mode in &self.task_modes {
            for &scheme in &self.schemes {
                for &n_synthetic in &self.n_synthetic {
                    out.push(SweepCell {
                        task_mode,
                        scheme,
                        n_synthetic,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cell: SweepCell,
    pub row: Option<AucRow>,
    pub error: Option<String>,
}

/// Runs every cell; a failing cell is recorded and the sweep continues.
pub fn small_scale_sweep<F>(grid: &SweepGrid, mut run_cell: F) -> Vec<SweepResult>
where
    F: FnMut(&SweepCell) -> Result<AucRow, AugError>,
{
    grid.cells()
        .into_iter()
        .map(|cell| match run_cell(&cell) {
            Ok(mut row) => {
                row.label = cell.label();
                SweepResult {
                    cell,
                    row: Some(row),
                    error: None,
                }
            }
            Err(e) => {
                warn!("sweep cell {} failed: {e}", cell.label());
                SweepResult {
                    cell,
                    row: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect()
}

/// Trains and scores one sweep cell on in-memory data. Single-task mode
/// trains one single-output network per finding and merges their scores.
pub struct SweepData<'a> {
    pub base: TrainingConfig,
    pub real: &'a [TrainItem],
    pub real_images: &'a [Vec<f32>],
    /// Synthetic records grouped per synthetic patient, in generation order.
    pub synthetic: &'a [CounterfactualRecord],
    pub synthetic_images: &'a BTreeMap<String, Vec<f32>>,
    pub matrix: Option<&'a CooccurrenceMatrix>,
    pub eval_images: &'a [Vec<f32>],
    pub eval_labels: &'a [Vec<Option<bool>>],
    pub exec: Exec,
}

impl SweepData<'_> {
    pub fn run(&self, cell: &SweepCell) -> Result<AucRow, AugError> {
        let findings = &self.base.findings;
        let mut patients: Vec<&str> = vec![];
        for r in self.synthetic {
            if !patients.contains(&r.source_patient_id.as_str()) {
                patients.push(&r.source_patient_id);
            }
        }
        if cell.n_synthetic > patients.len() {
            return Err(AugError::Config(format!(
                "{} synthetic patients requested, {} available",
                cell.n_synthetic,
                patients.len()
            )));
        }
        let keep: HashSet<&str> = patients[..cell.n_synthetic].iter().copied().collect();
        let records: Vec<CounterfactualRecord> = self
            .synthetic
            .iter()
            .filter(|r| keep.contains(r.source_patient_id.as_str()))
            .cloned()
            .collect();
        let set = assemble_training_set(&[], &records, findings, cell.scheme, self.matrix, self.base.seed)?;
        let mut items: Vec<TrainItem> = self.real.to_vec();
        let mut images: Vec<Vec<f32>> = self.real_images.to_vec();
        for it in set.items {
            let img = self
                .synthetic_images
                .get(&it.id)
                .ok_or_else(|| AugError::Integrity(format!("no image for {}", it.id)))?;
            images.push(img.clone());
            items.push(it);
        }
        let (tr, va) = split_validation(&items, self.base.validation_fraction, self.base.seed);
        let index: BTreeMap<&str, usize> = items.iter().enumerate().map(|(i, it)| (it.id.as_str(), i)).collect();
        let imgs = |v: &[TrainItem]| -> Vec<Vec<f32>> { v.iter().map(|it| images[index[it.id.as_str()]].clone()).collect() };
        let (tr_img, va_img) = (imgs(&tr), imgs(&va));

        let scores: Vec<Vec<f64>> = match cell.task_mode {
            TaskMode::Multi => {
                let cfg = TrainingConfig {
                    scheme: cell.scheme,
                    ..self.base.clone()
                };
                let (model, _) = train(&cfg, &tr, &tr_img, &va, &va_img, self.exec)?;
                self.exec.map(self.eval_images, |im| model.net.predict(im))
            }
            TaskMode::Single => {
                let mut per_finding: Vec<Vec<f64>> = vec![];
                for (fi, f) in findings.iter().enumerate() {
                    let narrow = |v: &[TrainItem]| -> Vec<TrainItem> {
                        v.iter()
                            .map(|it| TrainItem {
                                targets: LabelVector {
                                    values: vec![it.targets.values[fi]],
                                },
                                ..it.clone()
                            })
                            .collect()
                    };
                    let cfg = TrainingConfig {
                        scheme: cell.scheme,
                        findings: vec![f.clone()],
                        ..self.base.clone()
                    };
                    let (model, _) = train(&cfg, &narrow(&tr), &tr_img, &narrow(&va), &va_img, self.exec)?;
                    per_finding.push(self.exec.map(self.eval_images, |im| model.net.predict(im)[0]));
                }
                (0..self.eval_images.len())
                    .map(|i| per_finding.iter().map(|col| col[i]).collect())
                    .collect()
            }
        };
        Ok(auc_row(&cell.label(), findings, &scores, self.eval_labels))
    }
}

pub fn write_sweep_report<W: Write>(w: W, findings: &[FindingKey], results: &[SweepResult]) -> Result<(), AugError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["task_mode".to_string(), "scheme".into(), "n_synthetic".into()];
    header.extend(findings.iter().map(|f| f.to_string()));
    header.push("error".into());
    out.write_record(&header)?;
    for r in results {
        let mut rec = vec![
            format!("{:?}", r.cell.task_mode).to_ascii_lowercase(),
            r.cell.scheme.name().to_string(),
            r.cell.n_synthetic.to_string(),
        ];
        match &r.row {
            Some(row) => rec.extend(row.auc.iter().map(|a| a.map(fmt_cell).unwrap_or_default())),
            None => rec.extend(findings.iter().map(|_| String::new())),
        }
        rec.push(r.error.clone().unwrap_or_default());
        out.write_record(&rec)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}
