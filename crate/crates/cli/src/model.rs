//! stress, train, evaluate, toy-demo.

use std::collections::HashSet;
use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cfaudit_core::adapters::AdapterConfig;
use cfaudit_core::augtrain::{
    assemble_training_set, evaluate_auc, load_images, partition_synthetic, split_validation, train as train_net, AucTable,
    LabelingScheme, Origin, TrainedModel, TrainingConfig, SYNTHETIC_TRAIN_FRACTION,
};
use cfaudit_core::cohort::{read_split_csv, Split};
use cfaudit_core::editor::{Manifest, RecordKind};
use cfaudit_core::findings::{study_findings, FindingKey};
use cfaudit_core::stress::{
    change_matrix, predict_cohort, probability_reference_report, write_probability_report, Classifier, PredictItem,
    ReferenceSet, Source,
};
use cfaudit_core::toy_demo::{run_toy_demo, ToyDemoConfig};
use clap::ArgMatches;
use serde::{Deserialize, Serialize};

use crate::data::{create, load_matrix, load_scans, parse_findings, write_json};
use crate::{finish_run, start_run, usage, Common, Ctx, Outcome};

/// Which classifier to run: an adapter config or a trained model directory.
#[derive(clap::Args, Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierOpts {
    /// Adapter TOML.
    #[arg(long, conflicts_with = "model")]
    pub adapter: Option<PathBuf>,
    /// Directory written by `train` (model.json + model.bin).
    #[arg(long)]
    pub model: Option<PathBuf>,
}

impl ClassifierOpts {
    fn resolve(&mut self, ctx: &Ctx) -> Result<()> {
        self.adapter = self.adapter.take().map(|p| ctx.input(&p));
        self.model = self.model.take().map(|p| ctx.input(&p));
        if self.adapter.is_none() && self.model.is_none() {
            return Err(usage("one of --adapter or --model is required"));
        }
        Ok(())
    }

    fn build(&self, scratch: &Path) -> Result<Box<dyn Classifier>> {
        if let Some(dir) = &self.model {
            let name = dir.file_name().and_then(|s| s.to_str()).unwrap_or("model").to_string();
            return Ok(Box::new(TrainedModel::load(dir, &name)?));
        }
        let path = self.adapter.as_ref().expect("resolved");
        Ok(AdapterConfig::from_path(path)?.build(scratch)?)
    }
}

/// Findings to score: the requested ones, else the study findings the
/// classifier supports.
fn pick_findings(requested: &[String], clf: &dyn Classifier) -> Vec<FindingKey> {
    if !requested.is_empty() {
        return parse_findings(requested);
    }
    study_findings()
        .into_iter()
        .filter(|f| clf.findings().contains(f))
        .collect()
}

#[derive(clap::Args, Debug, Serialize, Deserialize)]
pub struct StressArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    #[command(flatten)]
    pub classifier: ClassifierOpts,
    /// Counterfactual manifest (eval kind).
    #[arg(long)]
    pub manifest: PathBuf,
    /// The unedited scans the manifest was made from (cohort JSONL).
    #[arg(long)]
    pub sources: PathBuf,
    /// Real test cohort for percentile references (cohort JSONL).
    #[arg(long)]
    pub reference: PathBuf,
    /// Findings to score (default: study findings the classifier supports).
    #[arg(long, value_delimiter = ',')]
    pub findings: Vec<String>,
    /// A read_cooccurrence.csv; adds the probability-vs-reads table.
    #[arg(long)]
    pub reads_matrix: Option<PathBuf>,
}

pub fn stress(ctx: &Ctx, args: StressArgs, m: &ArgMatches) -> Result<Outcome> {
    let mut a = ctx.merge(&args, m, &args.common)?;
    a.classifier.resolve(ctx)?;
    a.manifest = ctx.input(&a.manifest);
    a.sources = ctx.input(&a.sources);
    a.reference = ctx.input(&a.reference);
    a.reads_matrix = a.reads_matrix.map(|p| ctx.input(&p));
    let manifest = Manifest::read(&a.manifest)?;
    let sources = load_scans(&a.sources)?;
    let reference = load_scans(&a.reference)?;
    let reads = a.reads_matrix.as_deref().map(load_matrix).transpose()?;
    let Some(run) = start_run(ctx, "stress", &a, &args.common)? else {
        return Ok(Outcome::Ok);
    };
    let clf = a.classifier.build(&run.path("scratch"))?;
    let findings = pick_findings(&a.findings, clf.as_ref());
    if findings.is_empty() {
        bail!("classifier {} supports none of the requested findings", clf.name());
    }
    log::info!("stress-testing {} on {} findings", clf.name(), findings.len());

    let ref_items: Vec<PredictItem> = reference
        .iter()
        .map(|s| PredictItem {
            scan_id: s.scan.scan_id.clone(),
            image_path: s.scan.image_path.clone(),
            source: Source::Reference,
            patient_key: s.scan.patient_id.clone(),
            added_pathology: None,
        })
        .collect();
    let ref_table = predict_cohort(clf.as_ref(), &ref_items, &findings, ctx.exec)?;
    ref_table.write_csv(create(&run.path("reference_predictions.csv"))?)?;
    let refs = ReferenceSet::from_table(&ref_table)?;

    let mut items: Vec<PredictItem> = sources
        .iter()
        .map(|s| PredictItem {
            scan_id: s.scan.scan_id.clone(),
            image_path: s.scan.image_path.clone(),
            source: Source::Baseline,
            patient_key: s.scan.patient_id.clone(),
            added_pathology: None,
        })
        .collect();
    items.extend(
        manifest
            .records
            .iter()
            .filter(|r| r.is_ok() && r.kind == RecordKind::Edit)
            .map(|r| PredictItem {
                scan_id: r.output_id.clone(),
                image_path: r.output_path.clone(),
                source: Source::Counterfactual,
                patient_key: r.source_patient_id.clone(),
                added_pathology: Some(r.prompt.pathology_key.clone()),
            }),
    );
    let table = predict_cohort(clf.as_ref(), &items, &findings, ctx.exec)?;
    if !table.failures.is_empty() {
        log::warn!("{} images failed prediction", table.failures.len());
    }
    table.write_csv(create(&run.path("predictions.csv"))?)?;

    let added: Vec<FindingKey> = {
        let prompted: HashSet<&FindingKey> = manifest.records.iter().map(|r| &r.prompt.pathology_key).collect();
        findings.iter().filter(|f| prompted.contains(f)).cloned().collect()
    };
    let matrix = change_matrix(&table, &refs, &added, &findings)?;
    matrix.write_csv(create(&run.path("change_matrix.csv"))?)?;
    if let Some(reads) = &reads {
        let rows = probability_reference_report(&table, &added, &findings, reads)?;
        write_probability_report(create(&run.path("probability_report.csv"))?, &rows)?;
    }
    let _ = std::fs::remove_dir_all(run.path("scratch"));
    finish_run(run)
}

#[derive(clap::Args, Debug, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// Real scans (cohort JSONL).
    #[arg(long)]
    pub real: PathBuf,
    /// Split CSV; keeps TRAIN and VAL patients and validates on VAL.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Training-cohort manifest of counterfactuals.
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
    /// Share of synthetic baseline patients trained on; the rest is
    /// written to synthetic_holdout.jsonl.
    #[arg(long, default_value_t = SYNTHETIC_TRAIN_FRACTION)]
    pub synthetic_train_fraction: f64,
    /// Use only the first N synthetic training patients.
    #[arg(long)]
    pub n_synthetic: Option<usize>,
    #[arg(long, default_value = "OFF_TARGET_COOCCURRENCE")]
    pub scheme: String,
    /// Co-occurrence matrix for the co-occurrence scheme.
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 50)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.1)]
    pub validation_fraction: f64,
    #[arg(long, default_value_t = 32)]
    pub input_size: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [8usize, 16])]
    pub channels: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn train(ctx: &Ctx, args: TrainArgs, m: &ArgMatches) -> Result<Outcome> {
    let mut a = ctx.merge(&args, m, &args.common)?;
    a.real = ctx.input(&a.real);
    for p in [&mut a.split, &mut a.synthetic, &mut a.matrix] {
        *p = p.take().map(|p| ctx.input(&p));
    }
    let scheme: LabelingScheme = serde_json::from_value(serde_json::Value::String(a.scheme.clone()))
        .map_err(|_| usage(format!("unknown labeling scheme {:?}", a.scheme)))?;
    let findings = study_findings();
    let config = TrainingConfig {
        learning_rate: a.learning_rate,
        epochs: a.epochs,
        batch_size: a.batch_size,
        early_stop_patience: a.patience,
        findings: findings.clone(),
        real_manifest: Some(a.real.clone()),
        synthetic_manifest: a.synthetic.clone(),
        scheme,
        seed: a.seed,
        validation_fraction: a.validation_fraction,
        input_size: a.input_size,
        channels: a.channels.clone(),
    };
    config.validate()?;

    let mut real = load_scans(&a.real)?;
    let mut val_patients: Option<HashSet<String>> = None;
    if let Some(sp) = &a.split {
        let split = read_split_csv(File::open(sp).with_context(|| format!("opening {}", sp.display()))?)?;
        let keep: HashSet<&str> = split
            .iter()
            .filter(|s| s.split != Split::Test)
            .map(|s| s.patient_id.as_str())
            .collect();
        real.retain(|s| keep.contains(s.scan.patient_id.as_str()));
        let val: HashSet<String> = split
            .iter()
            .filter(|s| s.split == Split::Val)
            .map(|s| s.patient_id.clone())
            .collect();
        if !val.is_empty() {
            val_patients = Some(val);
        }
    }
    if !(0.0..=1.0).contains(&a.synthetic_train_fraction) {
        return Err(usage("--synthetic-train-fraction must be in [0, 1]"));
    }
    let source = a.synthetic.as_deref().map(Manifest::read).transpose()?;
    let (mut synthetic, holdout) = match &source {
        Some(m) => partition_synthetic(&m.records, a.synthetic_train_fraction, a.seed),
        None => (vec![], vec![]),
    };
    if let Some(n) = a.n_synthetic {
        let mut seen: Vec<String> = vec![];
        synthetic.retain(|r| {
            if !seen.contains(&r.source_patient_id) {
                if seen.len() == n {
                    return false;
                }
                seen.push(r.source_patient_id.clone());
            }
            true
        });
    }
    let matrix = a.matrix.as_deref().map(load_matrix).transpose()?;
    let Some(run) = start_run(ctx, "train", &a, &args.common)? else {
        return Ok(Outcome::Ok);
    };
    write_json(&run.path("training_config.json"), &config)?;
    if let Some(m) = &source {
        let n = holdout.len();
        Manifest::new(m.meta.kind, n, m.meta.run_seed, m.meta.params.clone(), holdout).write(&run.dir, "synthetic_holdout")?;
        log::info!("{n} synthetic records held out");
    }
    let set = assemble_training_set(&real, &synthetic, &findings, scheme, matrix.as_ref(), config.seed)?;
    write_json(&run.path("composition.json"), &set.composition)?;
    let (tr, va) = match &val_patients {
        // real VAL patients validate; synthetic items all train
        Some(val) => set
            .items
            .iter()
            .cloned()
            .partition::<Vec<_>, _>(|it| !(it.origin == Origin::Real && val.contains(it.patient_key.trim_start_matches("real:")))),
        None => split_validation(&set.items, config.validation_fraction, config.seed),
    };
    log::info!("training on {} items, validating on {}", tr.len(), va.len());
    let tr_img = load_images(&tr, config.input_size, ctx.exec)?;
    let va_img = load_images(&va, config.input_size, ctx.exec)?;
    let (mut model, log) = train_net(&config, &tr, &tr_img, &va, &va_img, ctx.exec)?;
    model.name = "model".into();
    model.save(&run.path("model"))?;
    log.write_jsonl(create(&run.path("training_log.jsonl"))?)?;
    log::info!("best epoch {} of {}", log.best_epoch, log.stop_epoch);
    finish_run(run)
}

#[derive(clap::Args, Debug, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    #[command(flatten)]
    pub classifier: ClassifierOpts,
    /// Labeled cohort to score, as LABEL=JSONL (repeatable).
    #[arg(long = "cohort", required = true)]
    pub cohorts: Vec<String>,
    /// Findings to score (default: study findings the classifier supports).
    #[arg(long, value_delimiter = ',')]
    pub findings: Vec<String>,
}

pub fn evaluate(ctx: &Ctx, args: EvaluateArgs, m: &ArgMatches) -> Result<Outcome> {
    let mut a = ctx.merge(&args, m, &args.common)?;
    a.classifier.resolve(ctx)?;
    let mut cohorts = vec![];
    for c in &mut a.cohorts {
        let (label, path) = c
            .split_once('=')
            .ok_or_else(|| usage(format!("--cohort expects LABEL=JSONL, got {c:?}")))?;
        let path = ctx.input(Path::new(path));
        cohorts.push((label.to_string(), load_scans(&path)?));
        *c = format!("{label}={}", path.display());
    }
    let Some(run) = start_run(ctx, "evaluate", &a, &args.common)? else {
        return Ok(Outcome::Ok);
    };
    let clf = a.classifier.build(&run.path("scratch"))?;
    let findings = pick_findings(&a.findings, clf.as_ref());
    let mut rows = vec![];
    for (label, scans) in &cohorts {
        rows.push(evaluate_auc(clf.as_ref(), label, scans, &findings, ctx.exec)?);
    }
    AucTable { findings, rows }.write_csv(create(&run.path("auc.csv"))?)?;
    let _ = std::fs::remove_dir_all(run.path("scratch"));
    finish_run(run)
}

#[derive(clap::Args, Debug, Serialize, Deserialize)]
pub struct ToyDemoArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Synthetic patients in the augmentation cohort.
    #[arg(long, default_value_t = 5000)]
    pub n_synthetic: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// Exit 1 when a criterion fails.
    #[arg(long)]
    #[serde(skip)]
    pub strict: bool,
}

pub fn toy_demo(ctx: &Ctx, args: ToyDemoArgs, m: &ArgMatches) -> Result<Outcome> {
    let a = ctx.merge(&args, m, &args.common)?;
    let mut cfg = ToyDemoConfig {
        seed: a.seed,
        n_synthetic: a.n_synthetic,
        ..Default::default()
    };
    cfg.training.seed = a.seed;
    cfg.training.epochs = a.epochs;
    cfg.training.early_stop_patience = cfg.training.early_stop_patience.min(a.epochs);
    let Some(run) = start_run(ctx, "toy-demo", &cfg, &args.common)? else {
        return Ok(Outcome::Ok);
    };
    let outcome = run_toy_demo(&cfg, &run.dir, ctx.exec)?;
    write_json(&run.path("outcome.json"), &outcome)?;
    for c in &outcome.criteria {
        println!("{} {}: {:.3} (need {})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.threshold);
    }
    let passed = outcome.passed();
    finish_run(run)?;
    Ok(if args.strict && !passed { Outcome::Violations } else { Outcome::Ok })
}
