//! End-to-end shortcut experiment in the toy shape world.
//!
//! Finding A (a square, "cardiomegaly") and finding B (a ring, "edema")
//! co-occur in 90% of the A-or-B training scans, and B is drawn faintly in
//! real scans. A classifier trained on that cohort leans on A to predict B.
//! Stamped counterfactuals labeled with their read co-occurrence remove the
//! shortcut.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::GrayImage;
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augtrain::{
    assemble_training_set, auc_row, split_validation, train, AucRow, AucTable, AugError, Composition,
    LabelingScheme, TrainedModel, TrainingConfig,
};
use crate::cohort::{ingest_cohort, real_cooccurrence, sample_no_finding, CohortError, IngestOptions, LabeledScan};
use crate::editor::{
    final_prompts, generate_eval_cohort, generate_training_cohort, EditContext, EditSource, EditorError, EditorParams,
    Manifest, MockBackend, ToyGenerator,
};
use crate::exec::Exec;
use crate::findings::{study_findings, Cohort, FindingKey, READ_FINDINGS};
use crate::hashing::sub_seed;
use crate::imaging::{load_gray, save_png, ImageError};
use crate::matrix::{CooccurrenceMatrix, MatrixError};
use crate::reader::{compute_read_cooccurrence, ReadLabel, ReadRecord, ReaderError, UnsurePolicy};
use crate::stress::{change_matrix, PercentileChangeMatrix, PredictItem, PredictionTable, ReferenceSet, Source, StressError};
use crate::toy::{Shape, ShapeOracle, ShapeWorld};

pub const SHORTCUT_MIN: f64 = 15.0;
pub const RESIDUAL_MAX: f64 = 5.0;
pub const AUC_DROP_MAX: f64 = 0.02;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Editor(#[from] EditorError),
    #[error(transparent)]
    Train(#[from] AugError),
    #[error(transparent)]
    Stress(#[from] StressError),
    #[error(transparent)]
    Reader(#[from] ReaderError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("demo invariant violated: {0}")]
    Invariant(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DemoError + '_ {
    move |source| DemoError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDemoConfig {
    pub seed: u64,
    pub n_real_train: usize,
    pub n_real_test: usize,
    /// No-finding test scans used as stress-test baselines.
    pub n_eval_baselines: usize,
    /// Generated synthetic patients (one baseline plus six edits each).
    pub n_synthetic: usize,
    pub confounded: FindingKey,
    pub target: FindingKey,
    /// Share of A-or-B scans that carry both.
    pub confounding: f64,
    /// Share of scans carrying A or B.
    pub a_or_b_rate: f64,
    /// Independent rate of each remaining study finding.
    pub other_rate: f64,
    /// Opacity of the target shape in real scans.
    pub target_alpha: f32,
    pub world: ShapeWorld,
    /// Editor strength for the synthetic training cohort.
    pub synthetic_strength: f64,
    pub training: TrainingConfig,
}

impl Default for ToyDemoConfig {
    fn default() -> Self {
        ToyDemoConfig {
            seed: 7,
            n_real_train: 1200,
            n_real_test: 600,
            n_eval_baselines: 100,
            n_synthetic: 5000,
            confounded: "cardiomegaly".into(),
            target: "edema".into(),
            confounding: 0.9,
            a_or_b_rate: 0.2,
            other_rate: 0.1,
            target_alpha: 0.5,
            world: ShapeWorld::default(),
            synthetic_strength: 0.4,
            training: TrainingConfig {
                learning_rate: 3e-3,
                epochs: 30,
                batch_size: 32,
                early_stop_patience: 10,
                findings: study_findings(),
                scheme: LabelingScheme::OffTargetAbsent,
                seed: 7,
                validation_fraction: 0.1,
                input_size: 32,
                channels: vec![8, 16],
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub name: String,
    pub value: f64,
    pub threshold: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDemoOutcome {
    pub shortcut_before: f64,
    pub shortcut_after: f64,
    pub target_auc_before: f64,
    pub target_auc_after: f64,
    pub criteria: Vec<Criterion>,
    pub composition_before: Composition,
    pub composition_after: Composition,
    pub adherence: f64,
    pub stop_epochs: (usize, usize),
    pub seconds: f64,
}

impl ToyDemoOutcome {
    pub fn passed(&self) -> bool {
        self.criteria.iter().all(|c| c.pass)
    }
}

/// Draws the labels of one real scan.
fn draw_findings(cfg: &ToyDemoConfig, rng: &mut ChaCha8Rng) -> Vec<&'static str> {
    let a = Shape::for_finding(cfg.confounded.as_str()).map(Shape::finding).unwrap_or("cardiomegaly");
    let b = Shape::for_finding(cfg.target.as_str()).map(Shape::finding).unwrap_or("edema");
    let mut out = vec![];
    if rng.random_bool(cfg.a_or_b_rate) {
        if rng.random_bool(cfg.confounding) {
            out.extend([a, b]);
        } else if rng.random_bool(0.5) {
            out.push(a);
        } else {
            out.push(b);
        }
    }
    for f in study_findings() {
        let key = READ_FINDINGS.iter().copied().find(|k| *k == f.as_str()).expect("study finding");
        if key != a && key != b && rng.random_bool(cfg.other_rate) {
            out.push(key);
        }
    }
    out
}

/// Renders the real cohort to `dir` and writes its metadata CSV.
pub fn write_real_cohort(cfg: &ToyDemoConfig, world: &ShapeWorld, dir: &Path) -> Result<PathBuf, DemoError> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    let csv_path = dir.join("cohort.csv");
    let mut out = csv::Writer::from_path(&csv_path).map_err(|e| DemoError::Invariant(e.to_string()))?;
    let mut header = vec!["scan_id", "patient_id", "view", "age_years", "sex", "image_path", "no_finding"];
    header.extend(READ_FINDINGS);
    out.write_record(&header).map_err(|e| DemoError::Invariant(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "real-cohort"));
    for i in 0..cfg.n_real_train + cfg.n_real_test {
        let findings = draw_findings(cfg, &mut rng);
        let shapes: Vec<(Shape, f32)> = findings
            .iter()
            .map(|f| {
                let alpha = if *f == cfg.target.as_str() { cfg.target_alpha } else { 1.0 };
                (Shape::for_finding(f).expect("toy finding"), alpha)
            })
            .collect();
        let scan_id = format!("real-{i:05}");
        let px = world.render_with_alpha(&shapes, sub_seed(cfg.seed, &scan_id));
        let path = img_dir.join(format!("{scan_id}.png"));
        save_png(&crate::imaging::from_unit(&px, world.size as u32, world.size as u32)?, &path)?;
        let mut rec = vec![
            scan_id.clone(),
            format!("pt-{i:05}"),
            "PA".into(),
            "50".into(),
            "U".into(),
            path.display().to_string(),
            u8::from(findings.is_empty()).to_string(),
        ];
        rec.extend(READ_FINDINGS.iter().map(|k| u8::from(findings.contains(k)).to_string()));
        out.write_record(&rec).map_err(|e| DemoError::Invariant(e.to_string()))?;
    }
    out.flush().map_err(io_err(&csv_path))?;
    Ok(csv_path)
}

fn items_for(scans: &[LabeledScan], source: Source) -> Vec<PredictItem> {
    scans
        .iter()
        .map(|s| PredictItem {
            scan_id: s.scan.scan_id.clone(),
            image_path: s.scan.image_path.clone(),
            source,
            patient_key: s.scan.patient_id.clone(),
            added_pathology: None,
        })
        .collect()
}

fn predict_loaded(model: &TrainedModel, items: &[PredictItem], images: &HashMap<String, Vec<f32>>, exec: Exec) -> PredictionTable {
    let rows = exec.map(items, |it| crate::stress::PredictionRow {
        item: it.clone(),
        probabilities: model.net.predict(&images[&it.image_path]),
    });
    PredictionTable {
        adapter: model.name.clone(),
        findings: model.findings.clone(),
        rows,
        failures: vec![],
    }
}

struct Stage<'a> {
    exec: Exec,
    findings: &'a [FindingKey],
    images: &'a HashMap<String, Vec<f32>>,
    reference_items: &'a [PredictItem],
    stress_items: &'a [PredictItem],
    test: &'a [LabeledScan],
}

impl Stage<'_> {
    fn evaluate(&self, model: &TrainedModel, label: &str, dir: &Path) -> Result<(PercentileChangeMatrix, AucRow), DemoError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let reference = predict_loaded(model, self.reference_items, self.images, self.exec);
        let refs = ReferenceSet::from_table(&reference)?;
        let stress = predict_loaded(model, self.stress_items, self.images, self.exec);
        let m = change_matrix(&stress, &refs, self.findings, self.findings)?;
        let path = dir.join("change_matrix.csv");
        m.write_csv(fs::File::create(&path).map_err(io_err(&path))?)?;
        let path = dir.join("predictions.csv");
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        reference.write_csv(&mut f)?;
        let mut body = vec![];
        stress.write_csv(&mut body)?;
        // second table without its header
        let text = String::from_utf8_lossy(&body);
        for line in text.lines().skip(1) {
            writeln!(f, "{line}").map_err(io_err(&path))?;
        }
        let scores: Vec<Vec<f64>> = reference.rows.iter().map(|r| r.probabilities.clone()).collect();
        let labels: Vec<Vec<Option<bool>>> = self
            .test
            .iter()
            .map(|s| {
                self.findings
                    .iter()
                    .map(|k| s.study_label(k.as_str()).map(|v| v.is_present()))
                    .collect()
            })
            .collect();
        model.save(dir).map_err(DemoError::from)?;
        Ok((m, auc_row(label, self.findings, &scores, &labels)))
    }
}

fn read_oracle(oracle: &ShapeOracle, manifest: &Manifest, exec: Exec) -> Result<(Vec<ReadRecord>, HashMap<String, FindingKey>), DemoError> {
    let ok: Vec<_> = manifest.records.iter().filter(|r| r.is_ok()).collect();
    let reads = exec.map(&ok, |r| -> Result<ReadRecord, DemoError> {
        let img = load_gray(Path::new(&r.output_path))?;
        let seen = oracle.read_findings(&img);
        Ok(ReadRecord {
            reader_id: "toy-oracle".into(),
            output_id: r.output_id.clone(),
            labels: READ_FINDINGS
                .iter()
                .map(|f| if seen.contains(f) { ReadLabel::Present } else { ReadLabel::Absent })
                .collect(),
            notes: String::new(),
            artificial_flag: Some(false),
            extra_anomaly_flag: Some(false),
        })
    });
    let prompts = ok
        .iter()
        .map(|r| (r.output_id.clone(), r.prompt.pathology_key.clone()))
        .collect();
    Ok((reads.into_iter().collect::<Result<_, _>>()?, prompts))
}

fn write_matrix(m: &CooccurrenceMatrix, path: &Path) -> Result<(), DemoError> {
    m.write_csv(fs::File::create(path).map_err(io_err(path))?)?;
    Ok(())
}

/// Runs the whole experiment under `out_dir` and reports the three criteria.
pub fn run_toy_demo(cfg: &ToyDemoConfig, out_dir: &Path, exec: Exec) -> Result<ToyDemoOutcome, DemoError> {
    let start = Instant::now();
    let world = cfg.world.clone();
    let findings = cfg.training.findings.clone();
    for k in [&cfg.confounded, &cfg.target] {
        if !findings.contains(k) {
            return Err(DemoError::Invariant(format!("{k} is not a training finding")));
        }
    }

    let csv_path = write_real_cohort(cfg, &world, &out_dir.join("real"))?;
    let (scans, _) = ingest_cohort(&csv_path, Cohort::Synthetic, &IngestOptions::default())?;
    let (train_scans, test_scans) = scans.split_at(cfg.n_real_train);
    info!("real cohort: {} train, {} test", train_scans.len(), test_scans.len());

    let eval_baselines = sample_no_finding(test_scans, cfg.n_eval_baselines, sub_seed(cfg.seed, "eval"))?;
    let params = EditorParams {
        image_size: world.size as u32,
        ..Default::default()
    };
    let backend = MockBackend::new(world.clone());
    let ctx = EditContext {
        backend: &backend,
        params: params.clone(),
        run_seed: cfg.seed,
        out_dir: out_dir.join("eval"),
    };
    let sources: Vec<EditSource> = eval_baselines.iter().map(|s| EditSource::from(&s.scan)).collect();
    let eval = generate_eval_cohort(&ctx, &sources, &final_prompts(), exec)?;
    eval.write(&out_dir.join("eval"), "eval")?;

    // the oracle plays the reader on the evaluation edits
    let oracle = ShapeOracle::new(&world);
    let (reads, prompts) = read_oracle(&oracle, &eval, exec)?;
    let cooc = compute_read_cooccurrence(&reads, &prompts, UnsurePolicy::AsAbsent)?;
    write_matrix(&cooc, &out_dir.join("read_cooccurrence.csv"))?;
    let read_keys: Vec<FindingKey> = READ_FINDINGS.iter().map(|k| FindingKey::new(*k)).collect();
    write_matrix(&real_cooccurrence(train_scans, &read_keys), &out_dir.join("real_cooccurrence.csv"))?;
    let adherence = {
        let diag: Vec<f64> = findings.iter().filter_map(|k| cooc.get(k.as_str(), k.as_str())).collect();
        diag.iter().sum::<f64>() / diag.len() as f64
    };

    let synth_ctx = EditContext {
        out_dir: out_dir.join("synthetic"),
        params: EditorParams {
            strength: cfg.synthetic_strength,
            ..ctx.params.clone()
        },
        ..ctx
    };
    let synthetic = generate_training_cohort(
        &synth_ctx,
        &ToyGenerator { world: world.clone() },
        cfg.n_synthetic,
        &final_prompts(),
        1,
        exec,
    )?;
    synthetic.write(&out_dir.join("synthetic"), "training")?;

    // every image the experiment touches, loaded once
    let mut paths: Vec<String> = scans.iter().map(|s| s.scan.image_path.clone()).collect();
    paths.extend(eval.records.iter().filter(|r| r.is_ok()).map(|r| r.output_path.clone()));
    paths.extend(synthetic.records.iter().filter(|r| r.is_ok()).map(|r| r.output_path.clone()));
    let loaded = exec.map(&paths, |p| load_gray(Path::new(p)).map(|img: GrayImage| crate::imaging::to_unit(&img)));
    let mut images = HashMap::new();
    for (p, img) in paths.into_iter().zip(loaded) {
        images.insert(p, img?);
    }

    let reference_items = items_for(test_scans, Source::Reference);
    let mut stress_items = items_for(&eval_baselines, Source::Baseline);
    stress_items.extend(eval.records.iter().filter(|r| r.is_ok()).map(|r| PredictItem {
        scan_id: r.output_id.clone(),
        image_path: r.output_path.clone(),
        source: Source::Counterfactual,
        patient_key: r.source_patient_id.clone(),
        added_pathology: Some(r.prompt.pathology_key.clone()),
    }));
    let stage = Stage {
        exec,
        findings: &findings,
        images: &images,
        reference_items: &reference_items,
        stress_items: &stress_items,
        test: test_scans,
    };

    let fit = |scheme: LabelingScheme, synth: &[crate::editor::CounterfactualRecord], dir: &Path| -> Result<(TrainedModel, Composition, usize), DemoError> {
        let set = assemble_training_set(train_scans, synth, &findings, scheme, Some(&cooc), cfg.seed)?;
        let (tr, va) = split_validation(&set.items, cfg.training.validation_fraction, cfg.seed);
        let (tr_img, va_img) = (load_images_cached(&tr, &images), load_images_cached(&va, &images));
        let config = TrainingConfig {
            scheme,
            ..cfg.training.clone()
        };
        let (model, log) = train(&config, &tr, &tr_img, &va, &va_img, exec)?;
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let log_path = dir.join("training_log.jsonl");
        log.write_jsonl(fs::File::create(&log_path).map_err(io_err(&log_path))?)
            .map_err(io_err(&log_path))?;
        Ok((model, set.composition, log.stop_epoch))
    };

    let (m0, comp0, stop0) = fit(LabelingScheme::OffTargetAbsent, &[], &out_dir.join("m0"))?;
    let (cm0, auc0) = stage.evaluate(&m0, "real only", &out_dir.join("m0"))?;
    info!("m0 done after {:.1}s", start.elapsed().as_secs_f64());
    let (m1, comp1, stop1) = fit(LabelingScheme::OffTargetCooccurrence, &synthetic.records, &out_dir.join("m1"))?;
    let (cm1, auc1) = stage.evaluate(&m1, "real + counterfactual", &out_dir.join("m1"))?;

    let t = findings.iter().position(|k| *k == cfg.target).expect("checked");
    let auc_table = AucTable {
        findings: findings.clone(),
        rows: vec![auc0.clone(), auc1.clone()],
    };
    let auc_path = out_dir.join("auc.csv");
    auc_table.write_csv(fs::File::create(&auc_path).map_err(io_err(&auc_path))?)?;

    let cell = |m: &PercentileChangeMatrix| m.get(cfg.confounded.as_str(), cfg.target.as_str()).unwrap_or(f64::NAN);
    let (before, after) = (cell(&cm0), cell(&cm1));
    let (auc_b0, auc_b1) = (auc0.auc[t].unwrap_or(f64::NAN), auc1.auc[t].unwrap_or(f64::NAN));
    let criteria = vec![
        Criterion {
            name: format!("shortcut present: cell[{}][{}] before augmentation", cfg.confounded, cfg.target),
            value: before,
            threshold: format!(">= {SHORTCUT_MIN}"),
            pass: before >= SHORTCUT_MIN,
        },
        Criterion {
            name: format!("shortcut removed: |cell[{}][{}]| after augmentation", cfg.confounded, cfg.target),
            value: after.abs(),
            threshold: format!("< {RESIDUAL_MAX}"),
            pass: after.abs() < RESIDUAL_MAX,
        },
        Criterion {
            name: format!("held-out AUC drop for {}", cfg.target),
            value: auc_b0 - auc_b1,
            threshold: format!("<= {AUC_DROP_MAX}"),
            pass: auc_b0 - auc_b1 <= AUC_DROP_MAX,
        },
    ];
    let outcome = ToyDemoOutcome {
        shortcut_before: before,
        shortcut_after: after,
        target_auc_before: auc_b0,
        target_auc_after: auc_b1,
        criteria,
        composition_before: comp0,
        composition_after: comp1,
        adherence,
        stop_epochs: (stop0, stop1),
        seconds: start.elapsed().as_secs_f64(),
    };
    let summary = out_dir.join("summary.json");
    fs::write(&summary, serde_json::to_string_pretty(&outcome).expect("serializable")).map_err(io_err(&summary))?;
    let config_path = out_dir.join("demo_config.json");
    fs::write(&config_path, serde_json::to_string_pretty(cfg).expect("serializable")).map_err(io_err(&config_path))?;
    Ok(outcome)
}

fn load_images_cached(items: &[crate::augtrain::TrainItem], images: &HashMap<String, Vec<f32>>) -> Vec<Vec<f32>> {
    items.iter().map(|it| images[&it.image_path].clone()).collect()
}
