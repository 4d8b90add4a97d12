//! ingest, generate, sweep.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cfaudit_core::augtrain::{
    assemble_training_set, load_images, small_scale_sweep, write_sweep_report, LabelingScheme, SweepData, SweepGrid,
    TaskMode, TrainingConfig,
};
use cfaudit_core::cohort::{
    apply_inclusion_filter, carve_validation, ingest_cohort, make_split, read_manifest, real_cooccurrence,
    sample_no_finding, write_manifest, write_split_csv, IngestOptions, LabeledScan,
};
use cfaudit_core::editor::{
    compose_backend, compose_generator, default_guidance_grid, default_strength_grid, generate_eval_cohort,
    generate_training_cohort, prompt_registry, prompts_for, sweep_params, write_sweep_index, BackendConfig,
    CompositionReport, EditContext, EditSource, EditingBackend, EditorParams, Manifest, PromptSpec, RecordKind,
};
use cfaudit_core::findings::{study_findings, Cohort, FindingKey, READ_FINDINGS};
use cfaudit_core::matrix::CooccurrenceMatrix;
use clap::{ArgMatches, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::{finish_run, start_run, usage, Common, Ctx, Outcome};

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

pub fn load_scans(path: &Path) -> Result<Vec<LabeledScan>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_manifest(f).with_context(|| format!("reading {}", path.display()))
}

pub fn load_matrix(path: &Path) -> Result<CooccurrenceMatrix> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    CooccurrenceMatrix::read_csv(f).with_context(|| format!("reading {}", path.display()))
}

pub fn parse_findings(list: &[String]) -> Vec<FindingKey> {
    list.iter().map(|s| FindingKey::normalize(s)).collect()
}

/// Scans of a cohort manifest whose image paths are relative get the data
/// root prepended, so later stages can run from anywhere.
fn absolutize(ctx: &Ctx, scans: &mut [LabeledScan]) {
    for s in scans {
        s.scan.image_path = ctx.input(Path::new(&s.scan.image_path)).display().to_string();
    }
}

#[derive(clap::Args, Debug, Serialize, Deserialize)]
pub struct IngestArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// nih, chexpert, mimic, padchest or synthetic.
    #[arg(long)]
    pub cohort: String,
    /// Metadata CSV.
    #[arg(long)]
    pub metadata: PathBuf,
    /// Prefix for relative image paths in the metadata.
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    /// Drop rows whose image file is missing.
    #[arg(long)]
    pub check_images: bool,
    /// Patients drawn into TRAIN; omit to skip the split.
    #[arg(long)]
    pub n_train_patients: Option<usize>,
    /// Share of TRAIN patients moved to VAL.
    #[arg(long, default_value_t = 0.0)]
    pub val_fraction: f64,
    /// No-finding scans sampled as editing sources (0 to skip).
    #[arg(long, default_value_t = 100)]
    pub n_no_finding: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn ingest(ctx: &Ctx, args: IngestArgs, m: &ArgMatches) -> Result<Outcome> {
    let mut a = ctx.merge(&args, m, &args.common)?;
    let cohort = Cohort::parse(&a.cohort).ok_or_else(|| usage(format!("unknown cohort {:?}", a.cohort)))?;
    a.metadata = ctx.input(&a.metadata);
    a.image_root = a.image_root.map(|p| ctx.input(&p));
    let Some(run) = start_run(ctx, "ingest", &a, &args.common)? else {
        return Ok(Outcome::Ok);
    };
    let opts = IngestOptions {
        image_root: a.image_root.clone(),
        check_images: a.check_images,
    };
    let (records, report) = ingest_cohort(&a.metadata, cohort, &opts)?;
    log::info!("parsed {} of {} rows ({} skipped)", report.parsed, report.rows_read, report.skipped.len());
    write_json(&run.path("ingest_report.json"), &report)?;
    let (mut kept, filter) = apply_inclusion_filter(&records, cohort);
    absolutize(ctx, &mut kept);
    log::info!("{} scans from {} patients pass the inclusion filter", filter.kept, filter.patients_kept);
    write_json(&run.path("filter_report.json"), &filter)?;
    write_manifest(create(&run.path("cohort.jsonl"))?, &kept)?;

    if let Some(n) = a.n_train_patients {
        let mut split = make_split(&kept, n, a.seed)?;
        if a.val_fraction > 0.0 {
            carve_validation(&mut split, a.val_fraction, a.seed);
        }
        write_split_csv(create(&run.path("split.csv"))?, &split)?;
    }
    if a.n_no_finding > 0 {
        let sample = sample_no_finding(&kept, a.n_no_finding, a.seed)?;
        write_manifest(create(&run.path("no_finding_sample.jsonl"))?, &sample)?;
    }

    // co-occurrence of the read findings in this cohort's own labels, in
    // study names so it lines up with the reader matrix
    let pairs: Vec<(&str, &str)> = READ_FINDINGS
        .iter()
        .filter_map(|f| cohort.study_alias(f).map(|alias| (*f, alias)))
        .collect();
    if !pairs.is_empty() {
        let vocab: Vec<FindingKey> = pairs.iter().map(|(_, v)| FindingKey::new(*v)).collect();
        let mut mat = real_cooccurrence(&kept, &vocab);
        let study: Vec<FindingKey> = pairs.iter().map(|(s, _)| FindingKey::new(*s)).collect();
        mat.row_keys = study.clone();
        mat.col_keys = study;
        mat.meta.insert("cohort".into(), cohort.name().into());
        mat.write_csv(create(&run.path("real_cooccurrence.csv"))?)?;
    }
    finish_run(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerateKind {
    /// One edit per (source scan, prompt).
    Eval,
    /// Generated baselines plus replicated edits of each.
    Training,
}

/// Editing options shared by generate and sweep.
#[derive(clap::Args, Debug, Clone, Serialize, Deserialize)]
pub struct EditorOpts {
    /// `mock`, or a TOML backend config for the composed editor.
    #[arg(long, default_value = "mock")]
    pub backend: String,
    /// Pathologies to prompt (default: the whole prompt registry).
    #[arg(long, value_delimiter = ',')]
    pub prompts: Vec<String>,
    #[arg(long, default_value_t = 4.0)]
    pub guidance_scale: f64,
    #[arg(long, default_value_t = 0.4)]
    pub strength: f64,
    #[arg(long, default_value_t = 50)]
    pub inference_steps: u32,
    /// Output side in pixels (default: 32 for the mock, 512 otherwise).
    #[arg(long)]
    pub image_size: Option<u32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl EditorOpts {
    fn resolve(&mut self, ctx: &Ctx) {
        if self.backend != "mock" {
            self.backend = ctx.input(Path::new(&self.backend)).display().to_string();
        }
        if self.image_size.is_none() {
            self.image_size = Some(if self.backend == "mock" { 32 } else { 512 });
        }
    }

    fn backend_config(&self) -> Result<BackendConfig> {
        if self.backend == "mock" {
            return Ok(BackendConfig {
                kind: "mock".into(),
                ..Default::default()
            });
        }
        let text = fs::read_to_string(&self.backend).with_context(|| format!("reading {}", self.backend))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", self.backend))
    }

    fn params(&self) -> EditorParams {
        EditorParams {
            guidance_scale: self.guidance_scale,
            strength: self.strength,
            inference_steps: self.inference_steps,
            image_size: self.image_size.expect("resolved"),
        }
    }

    fn prompt_specs(&self) -> Result<Vec<PromptSpec>> {
        if self.prompts.is_empty() {
            return Ok(prompt_registry());
        }
        Ok(prompts_for(&parse_findings(&self.prompts))?)
    }

    fn backend(&self, scratch: &Path) -> Result<(Box<dyn EditingBackend>, CompositionReport)> {
        Ok(compose_backend(&self.backend_config()?, scratch)?)
    }
}

#[derive(clap::Args, Debug, Serialize, Deserialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    #[arg(long, value_enum, default_value = "eval")]
    pub kind: GenerateKind,
    /// Source scans (a cohort JSONL, e.g. the no-finding sample). Eval only.
    #[arg(long)]
    pub sources: Option<PathBuf>,
    /// Generated baselines. Training only.
    #[arg(long, default_value_t = 10_000)]
    pub n_baselines: usize,
    /// Edits per (baseline, prompt). Training only.
    #[arg(long, default_value_t = 2)]
    pub replicates: u32,
    #[command(flatten)]
    pub editor: EditorOpts,
}

pub fn generate(ctx: &Ctx, args: GenerateArgs, m: &ArgMatches) -> Result<Outcome> {
    let mut a = ctx.merge(&args, m, &args.common)?;
    a.editor.resolve(ctx);
    a.sources = a.sources.map(|p| ctx.input(&p));
    let sources = match (a.kind, &a.sources) {
        (GenerateKind::Eval, None) => return Err(usage("generate --kind eval needs --sources")),
        (GenerateKind::Eval, Some(p)) => Some(load_scans(p)?),
        (GenerateKind::Training, Some(_)) => return Err(usage("--sources applies to --kind eval only")),
        (GenerateKind::Training, None) => None,
    };
    let prompts = a.editor.prompt_specs()?;
    let Some(run) = start_run(ctx, "generate", &a, &args.common)? else {
        return Ok(Outcome::Ok);
    };
    let (backend, composition) = a.editor.backend(&run.path("scratch"))?;
    write_json(&run.path("composition.json"), &composition)?;
    let ectx = EditContext {
        backend: backend.as_ref(),
        params: a.editor.params(),
        run_seed: a.editor.seed,
        out_dir: run.dir.clone(),
    };
    let manifest = match sources {
        Some(scans) => {
            let src: Vec<EditSource> = scans.iter().map(|s| EditSource::from(&s.scan)).collect();
            generate_eval_cohort(&ectx, &src, &prompts, ctx.exec)?
        }
        None => {
            let generator = compose_generator(&a.editor.backend_config()?, &run.path("scratch"))?;
            generate_training_cohort(&ectx, generator.as_ref(), a.n_baselines, &prompts, a.replicates, ctx.exec)?
        }
    };
    report_manifest(&manifest);
    manifest.write(&run.dir, "manifest")?;
    let _ = fs::remove_dir_all(run.path("scratch"));
    finish_run(run)
}

fn report_manifest(m: &Manifest) {
    log::info!(
        "{} records ({} expected, {} failed), content hash {}",
        m.meta.records,
        m.meta.expected_records,
        m.meta.failed,
        &m.meta.content_hash[..12]
    );
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Guidance x strength grid over source scans and prompts.
    Params,
    /// Small-scale training sweep over task mode, labeling scheme and size.
    Training,
}

#[derive(clap::Args, Debug, Serialize, Deserialize)]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    #[arg(long, value_enum, default_value = "params")]
    pub kind: SweepKind,
    /// Source scans for the parameter sweep.
    #[arg(long)]
    pub sources: Option<PathBuf>,
    /// Guidance values (default: 10 evenly spaced in [1.5, 10]).
    #[arg(long, value_delimiter = ',')]
    pub guidance: Vec<f64>,
    /// Strength values (default: 10 evenly spaced in [0.2, 1]).
    #[arg(long, value_delimiter = ',')]
    pub strength_grid: Vec<f64>,
    #[command(flatten)]
    pub editor: EditorOpts,
    /// Real training scans (cohort JSONL). Training sweep only.
    #[arg(long)]
    pub real: Option<PathBuf>,
    /// Training-cohort manifest. Training sweep only.
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
    /// Labeled evaluation scans (cohort JSONL). Training sweep only.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Co-occurrence matrix for the co-occurrence labeling scheme.
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values = ["single", "multi"])]
    pub task_modes: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values = ["OFF_TARGET_ABSENT", "OFF_TARGET_MASKED", "OFF_TARGET_COOCCURRENCE"])]
    pub schemes: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [2000usize, 5000])]
    pub n_synthetic: Vec<usize>,
    #[arg(long, default_value_t = 1e-4)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 50)]
    pub patience: usize,
    #[arg(long, default_value_t = 32)]
    pub input_size: usize,
}

pub fn sweep(ctx: &Ctx, args: SweepArgs, m: &ArgMatches) -> Result<Outcome> {
    let mut a = ctx.merge(&args, m, &args.common)?;
    a.editor.resolve(ctx);
    for p in [&mut a.sources, &mut a.real, &mut a.synthetic, &mut a.eval, &mut a.matrix] {
        *p = p.take().map(|p| ctx.input(&p));
    }
    match a.kind {
        SweepKind::Params => sweep_editor(ctx, a, &args.common),
        SweepKind::Training => sweep_training(ctx, a, &args.common),
    }
}

fn sweep_editor(ctx: &Ctx, mut a: SweepArgs, common: &Common) -> Result<Outcome> {
    let Some(src_path) = &a.sources else {
        return Err(usage("sweep --kind params needs --sources"));
    };
    let scans = load_scans(src_path)?;
    if a.guidance.is_empty() {
        a.guidance = default_guidance_grid();
    }
    if a.strength_grid.is_empty() {
        a.strength_grid = default_strength_grid();
    }
    let prompts = a.editor.prompt_specs()?;
    let Some(run) = start_run(ctx, "sweep", &a, common)? else {
        return Ok(Outcome::Ok);
    };
    let (backend, composition) = a.editor.backend(&run.path("scratch"))?;
    write_json(&run.path("composition.json"), &composition)?;
    let ectx = EditContext {
        backend: backend.as_ref(),
        params: a.editor.params(),
        run_seed: a.editor.seed,
        out_dir: run.dir.clone(),
    };
    let src: Vec<EditSource> = scans.iter().map(|s| EditSource::from(&s.scan)).collect();
    let manifest = sweep_params(&ectx, &src, &a.guidance, &a.strength_grid, &prompts, ctx.exec)?;
    report_manifest(&manifest);
    manifest.write(&run.dir, "manifest")?;
    write_sweep_index(create(&run.path("sweep_index.csv"))?, &manifest.records)?;
    let _ = fs::remove_dir_all(run.path("scratch"));
    finish_run(run)
}

fn parse_enum<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| usage(format!("unknown {what} {s:?}")))
}

fn sweep_training(ctx: &Ctx, a: SweepArgs, common: &Common) -> Result<Outcome> {
    let (Some(real_p), Some(syn_p), Some(eval_p)) = (&a.real, &a.synthetic, &a.eval) else {
        return Err(usage("sweep --kind training needs --real, --synthetic and --eval"));
    };
    let grid = SweepGrid {
        task_modes: a
            .task_modes
            .iter()
            .map(|s| parse_enum::<TaskMode>("task mode", s))
            .collect::<Result<_>>()?,
        schemes: a
            .schemes
            .iter()
            .map(|s| parse_enum::<LabelingScheme>("labeling scheme", s))
            .collect::<Result<_>>()?,
        n_synthetic: a.n_synthetic.clone(),
    };
    let findings = study_findings();
    let real = load_scans(real_p)?;
    let eval = load_scans(eval_p)?;
    let synthetic = Manifest::read(syn_p)?;
    let matrix = a.matrix.as_deref().map(load_matrix).transpose()?;
    if grid.schemes.contains(&LabelingScheme::OffTargetCooccurrence) && matrix.is_none() {
        bail!("the co-occurrence labeling scheme needs --matrix");
    }
    let Some(run) = start_run(ctx, "sweep", &a, common)? else {
        return Ok(Outcome::Ok);
    };
    let base = TrainingConfig {
        learning_rate: a.learning_rate,
        epochs: a.epochs,
        early_stop_patience: a.patience,
        input_size: a.input_size,
        seed: a.editor.seed,
        findings: findings.clone(),
        ..Default::default()
    };
    let real_set = assemble_training_set(&real, &[], &findings, LabelingScheme::OffTargetAbsent, None, base.seed)?;
    let real_images = load_images(&real_set.items, base.input_size, ctx.exec)?;
    let ok: Vec<_> = synthetic.records.iter().filter(|r| r.is_ok()).cloned().collect();
    let syn_set = assemble_training_set(&[], &ok, &findings, LabelingScheme::OffTargetAbsent, None, base.seed)?;
    let syn_images = load_images(&syn_set.items, base.input_size, ctx.exec)?;
    let synthetic_images: BTreeMap<String, Vec<f32>> =
        syn_set.items.iter().map(|it| it.id.clone()).zip(syn_images).collect();
    let eval_set = assemble_training_set(&eval, &[], &findings, LabelingScheme::OffTargetAbsent, None, base.seed)?;
    let eval_images = load_images(&eval_set.items, base.input_size, ctx.exec)?;
    let eval_labels: Vec<Vec<Option<bool>>> = eval_set
        .items
        .iter()
        .map(|it| it.target_values().iter().map(|v| v.map(|x| x >= 0.5)).collect())
        .collect();
    let data = SweepData {
        base,
        real: &real_set.items,
        real_images: &real_images,
        synthetic: &ok,
        synthetic_images: &synthetic_images,
        matrix: matrix.as_ref(),
        eval_images: &eval_images,
        eval_labels: &eval_labels,
        exec: ctx.exec,
    };
    let results = small_scale_sweep(&grid, |cell| data.run(cell));
    write_sweep_report(create(&run.path("auc_sweep.csv"))?, &findings, &results)?;
    let n_baselines = ok.iter().filter(|r| r.kind == RecordKind::Baseline).count();
    log::info!("{} cells over {n_baselines} synthetic baselines", results.len());
    finish_run(run)
}
