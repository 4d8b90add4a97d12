//! Counterfactual editing: prompt registry, backend contract, seeded batch
//! generation and the JSONL manifests that record every edit.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use image::GrayImage;
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::findings::{FindingKey, NO_FINDING};
use crate::hashing::{sha256_hex, stable_hash64};
use crate::imaging::{from_unit, load_gray, resize_square, save_png, to_unit, ImageError};
use crate::toy::{Shape, ShapeWorld};

pub const NO_FINDING_PROMPT: &str = "no acute cardiopulmonary process";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EditorError {
    #[error("invalid editor parameters: {0}")]
    InvalidParams(String),
    #[error("checkpoint composition error: {0}")]
    Composition(String),
    #[error("checkpoint resolution error: {0}")]
    Resolution(String),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("invalid argument: {0}")]
    Argument(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EditorError + '_ {
    move |source| EditorError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PromptStatus {
    Final,
    TestedOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSpec {
    pub pathology_key: FindingKey,
    pub prompt_text: String,
    pub status: PromptStatus,
}

impl PromptSpec {
    fn new(key: &str, text: &str, status: PromptStatus) -> Self {
        PromptSpec {
            pathology_key: FindingKey::new(key),
            prompt_text: text.to_string(),
            status,
        }
    }

    pub fn no_finding() -> Self {
        PromptSpec::new(NO_FINDING, NO_FINDING_PROMPT, PromptStatus::Final)
    }
}

/// The eight pathology prompts used for evaluation, in reader-sheet order.
/// Emphysema and nodule were evaluated and then dropped.
pub fn prompt_registry() -> Vec<PromptSpec> {
    use PromptStatus::*;
    vec![
        PromptSpec::new("cardiomegaly", "cardiomegaly", Final),
        PromptSpec::new("edema", "edema", Final),
        PromptSpec::new("pneumonia", "middle lobe pneumonia", Final),
        PromptSpec::new("pleural_effusion", "right pleural effusion", Final),
        PromptSpec::new("emphysema", "emphysema", TestedOnly),
        PromptSpec::new("hernia", "hernia", Final),
        PromptSpec::new("nodule", "solitary lung nodule", TestedOnly),
        PromptSpec::new("mass", "left upper lobe mass", Final),
    ]
}

/// Every prompt text tried during prompt selection, per pathology.
pub fn tested_prompt_texts() -> Vec<(&'static str, Vec<&'static str>)> {
    vec![
        (NO_FINDING, vec![NO_FINDING_PROMPT]),
        ("cardiomegaly", vec!["cardiomegaly"]),
        ("edema", vec!["edema", "butterfly edema"]),
        (
            "pneumonia",
            vec![
                "pneumonia",
                "right upper lobe pneumonia",
                "left upper lobe pneumonia",
                "middle lobe pneumonia",
                "right lower lobe pneumonia",
                "left lower lobe pneumonia",
            ],
        ),
        (
            "pleural_effusion",
            vec!["right pleural effusion", "left pleural effusion"],
        ),
        (
            "emphysema",
            vec!["emphysema", "severe emphysema", "panlobular emphysema"],
        ),
        ("hernia", vec!["hernia"]),
        (
            "nodule",
            vec!["solitary lung nodule", "multiple pulmonary nodules"],
        ),
        (
            "mass",
            vec![
                "right upper lobe mass",
                "left upper lobe mass",
                "middle lobe mass",
                "right lower lobe mass",
                "left lower lobe mass",
            ],
        ),
    ]
}

pub fn final_prompts() -> Vec<PromptSpec> {
    prompt_registry()
        .into_iter()
        .filter(|p| p.status == PromptStatus::Final)
        .collect()
}

/// Registry entries for the given keys, in the order requested.
pub fn prompts_for(keys: &[FindingKey]) -> Result<Vec<PromptSpec>, EditorError> {
    let reg = prompt_registry();
    keys.iter()
        .map(|k| {
            reg.iter()
                .find(|p| p.pathology_key == *k)
                .cloned()
                .ok_or_else(|| EditorError::Argument(format!("no prompt registered for {k}")))
        })
        .collect()
}

/// Pathology key a prompt text belongs to, searching every tested text.
pub fn pathology_for_text(text: &str) -> Option<&'static str> {
    tested_prompt_texts()
        .into_iter()
        .find(|(_, texts)| texts.contains(&text))
        .map(|(key, _)| key)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditorParams {
    pub guidance_scale: f64,
    pub strength: f64,
    pub inference_steps: u32,
    pub image_size: u32,
}

impl Default for EditorParams {
    fn default() -> Self {
        EditorParams {
            guidance_scale: 4.0,
            strength: 0.4,
            inference_steps: 50,
            image_size: 512,
        }
    }
}

impl EditorParams {
    pub fn validate(&self) -> Result<(), EditorError> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(EditorError::InvalidParams(format!(
                "strength {} outside [0, 1]",
                self.strength
            )));
        }
        if !(self.guidance_scale > 0.0 && self.guidance_scale.is_finite()) {
            return Err(EditorError::InvalidParams(format!(
                "guidance_scale {} must be positive",
                self.guidance_scale
            )));
        }
        if self.inference_steps == 0 || self.image_size < 8 {
            return Err(EditorError::InvalidParams(
                "inference_steps must be positive and image_size at least 8".into(),
            ));
        }
        Ok(())
    }
}

pub const MOCK_SOURCE: &str = "mock";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub text_encoder_source: String,
    pub denoiser_source: String,
    pub autoencoder_source: String,
}

impl BackendDescriptor {
    pub fn mock() -> Self {
        BackendDescriptor {
            text_encoder_source: MOCK_SOURCE.into(),
            denoiser_source: MOCK_SOURCE.into(),
            autoencoder_source: MOCK_SOURCE.into(),
        }
    }

    pub fn is_mock(&self) -> bool {
        self.text_encoder_source == MOCK_SOURCE
            && self.denoiser_source == MOCK_SOURCE
            && self.autoencoder_source == MOCK_SOURCE
    }

    /// Deviations from the reference composition: text encoder and denoiser
    /// from the finetuned generator, autoencoder from the base img2img model.
    pub fn composition_deviations(&self, generator: &str, base: &str) -> Vec<String> {
        let mut out = Vec::new();
        if self.text_encoder_source != generator {
            out.push(format!(
                "text encoder from {} instead of the finetuned generator",
                self.text_encoder_source
            ));
        }
        if self.denoiser_source != generator {
            out.push(format!(
                "denoiser from {} instead of the finetuned generator",
                self.denoiser_source
            ));
        }
        if self.autoencoder_source != base {
            out.push(format!(
                "autoencoder from {} instead of the base architecture default",
                self.autoencoder_source
            ));
        }
        out
    }
}

/// Anything that can apply a text-prompted edit to one image.
pub trait EditingBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;
    fn edit(
        &self,
        image: &GrayImage,
        prompt_text: &str,
        params: &EditorParams,
        seed: u64,
    ) -> Result<GrayImage, EditorError>;
}

/// Text-to-image generator used for synthetic baselines.
pub trait GeneratorBackend: Send + Sync {
    fn name(&self) -> &str;
    fn generate(&self, prompt_text: &str, size: u32, seed: u64) -> Result<GrayImage, EditorError>;
}

/// Deterministic test double: stamps the prompt's toy shape onto the image.
///
/// The stamp position comes from the seed and its opacity from `strength`
/// (full opacity from 0.4 up). Guidance and step count are recorded but
/// do not change the output. The no-finding prompt is an identity edit
/// apart from resizing.
#[derive(Debug, Clone)]
pub struct MockBackend {
    descriptor: BackendDescriptor,
    world: ShapeWorld,
}

impl Default for MockBackend {
    fn default() -> Self {
        MockBackend {
            descriptor: BackendDescriptor::mock(),
            world: ShapeWorld::default(),
        }
    }
}

impl MockBackend {
    pub fn new(world: ShapeWorld) -> Self {
        MockBackend {
            descriptor: BackendDescriptor::mock(),
            world,
        }
    }

    pub fn stamp_alpha(strength: f64) -> f32 {
        (2.5 * strength).clamp(0.0, 1.0) as f32
    }

    pub fn shape_for_prompt(prompt_text: &str) -> Option<Shape> {
        match pathology_for_text(prompt_text) {
            Some(NO_FINDING) => None,
            Some(key) => Shape::for_finding(key),
            None => Some(Shape::for_text(prompt_text)),
        }
    }
}

impl EditingBackend for MockBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn edit(
        &self,
        image: &GrayImage,
        prompt_text: &str,
        params: &EditorParams,
        seed: u64,
    ) -> Result<GrayImage, EditorError> {
        params.validate()?;
        let size = params.image_size;
        let base = if image.width() == size && image.height() == size {
            image.clone()
        } else {
            resize_square(image, size)
        };
        let Some(shape) = Self::shape_for_prompt(prompt_text) else {
            return Ok(base);
        };
        let world = ShapeWorld {
            size: size as usize,
            ..self.world.clone()
        };
        let e = world.extent();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rng.random_range(1..=world.size - e - 1);
        let y = rng.random_range(1..=world.size - e - 1);
        let mut px = to_unit(&base);
        world.stamp(&mut px, shape, x, y, e, Self::stamp_alpha(params.strength));
        Ok(from_unit(&px, size, size)?)
    }
}

/// Toy text-to-image generator: a toy-world scan carrying the prompt's shape
/// (nothing for the no-finding prompt).
#[derive(Debug, Clone, Default)]
pub struct ToyGenerator {
    pub world: ShapeWorld,
}

impl GeneratorBackend for ToyGenerator {
    fn name(&self) -> &str {
        "toy-generator"
    }

    fn generate(&self, prompt_text: &str, size: u32, seed: u64) -> Result<GrayImage, EditorError> {
        let world = ShapeWorld {
            size: size as usize,
            ..self.world.clone()
        };
        let shapes: Vec<Shape> = MockBackend::shape_for_prompt(prompt_text).into_iter().collect();
        Ok(world.render_image(&shapes, seed))
    }
}

/// Checkpoint facts needed to check that components fit together.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointShapes {
    pub text_hidden_size: Option<u64>,
    pub unet_cross_attention_dim: Option<u64>,
    pub unet_in_channels: Option<u64>,
    pub vae_latent_channels: Option<u64>,
}

fn read_config_field(path: &Path, field: &str) -> Result<Option<u64>, EditorError> {
    let text = fs::read_to_string(path)
        .map_err(|e| EditorError::Resolution(format!("{}: {e}", path.display())))?;
    let v: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| EditorError::Resolution(format!("{}: {e}", path.display())))?;
    Ok(v.get(field).and_then(|x| x.as_u64()))
}

/// Reads the component configs from diffusers-style checkpoint directories.
pub fn inspect_checkpoints(desc: &BackendDescriptor) -> Result<CheckpointShapes, EditorError> {
    let te = Path::new(&desc.text_encoder_source).join("text_encoder/config.json");
    let unet = Path::new(&desc.denoiser_source).join("unet/config.json");
    let vae = Path::new(&desc.autoencoder_source).join("vae/config.json");
    for p in [&te, &unet, &vae] {
        if !p.exists() {
            return Err(EditorError::Resolution(format!("missing {}", p.display())));
        }
    }
    Ok(CheckpointShapes {
        text_hidden_size: read_config_field(&te, "hidden_size")?,
        unet_cross_attention_dim: read_config_field(&unet, "cross_attention_dim")?,
        unet_in_channels: read_config_field(&unet, "in_channels")?,
        vae_latent_channels: read_config_field(&vae, "latent_channels")?,
    })
}

fn check_shapes(s: &CheckpointShapes) -> Result<(), EditorError> {
    if let (Some(a), Some(b)) = (s.text_hidden_size, s.unet_cross_attention_dim) {
        if a != b {
            return Err(EditorError::Composition(format!(
                "text encoder width {a} does not match denoiser cross-attention width {b}"
            )));
        }
    }
    if let (Some(a), Some(b)) = (s.unet_in_channels, s.vae_latent_channels) {
        if a != b {
            return Err(EditorError::Composition(format!(
                "denoiser expects {a} latent channels, autoencoder provides {b}"
            )));
        }
    }
    Ok(())
}

/// Backend that delegates each edit to an external runner process.
///
/// The runner receives one JSON object on stdin (`input_path`,
/// `output_path`, `prompt`, `guidance_scale`, `strength`, `inference_steps`,
/// `image_size`, `seed`, and the three checkpoint sources) and must write a
/// grayscale image to `output_path` and exit 0.
#[derive(Debug, Clone)]
pub struct ComposedBackend {
    descriptor: BackendDescriptor,
    runner: Vec<String>,
    scratch: PathBuf,
}

impl ComposedBackend {
    /// One runner round trip; `input` is `None` for text-to-image.
    fn call_runner(&self, input: Option<&Path>, tag: &str, prompt_text: &str, params: &EditorParams, seed: u64) -> Result<GrayImage, EditorError> {
        let output = self.scratch.join(format!("{tag}-out.png"));
        let request = serde_json::json!({
            "input_path": input,
            "output_path": output,
            "prompt": prompt_text,
            "guidance_scale": params.guidance_scale,
            "strength": params.strength,
            "inference_steps": params.inference_steps,
            "image_size": params.image_size,
            "seed": seed,
            "text_encoder_source": self.descriptor.text_encoder_source,
            "denoiser_source": self.descriptor.denoiser_source,
            "autoencoder_source": self.descriptor.autoencoder_source,
        });
        let (prog, args) = self
            .runner
            .split_first()
            .ok_or_else(|| EditorError::Backend("empty runner command".into()))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| EditorError::Backend(format!("spawn {prog}: {e}")))?;
        child
            .stdin
            .take()
            .expect("stdin piped")
            .write_all(request.to_string().as_bytes())
            .map_err(|e| EditorError::Backend(format!("runner stdin: {e}")))?;
        let out = child
            .wait_with_output()
            .map_err(|e| EditorError::Backend(format!("runner wait: {e}")))?;
        if !out.status.success() {
            return Err(EditorError::Backend(format!(
                "runner exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let img = load_gray(&output)?;
        let _ = fs::remove_file(&output);
        if img.width() != params.image_size || img.height() != params.image_size {
            return Err(EditorError::Backend(format!(
                "runner produced {}x{}, expected {}",
                img.width(),
                img.height(),
                params.image_size
            )));
        }
        Ok(img)
    }
}

/// Text-to-image through the same runner, with `input_path` null.
impl GeneratorBackend for ComposedBackend {
    fn name(&self) -> &str {
        &self.descriptor.denoiser_source
    }

    fn generate(&self, prompt_text: &str, size: u32, seed: u64) -> Result<GrayImage, EditorError> {
        let params = EditorParams {
            image_size: size,
            ..EditorParams::default()
        };
        let tag = format!("{seed:016x}-gen");
        self.call_runner(None, &tag, prompt_text, &params, seed)
    }
}

impl EditingBackend for ComposedBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn edit(
        &self,
        image: &GrayImage,
        prompt_text: &str,
        params: &EditorParams,
        seed: u64,
    ) -> Result<GrayImage, EditorError> {
        params.validate()?;
        let tag = format!("{seed:016x}-{}", &sha256_hex(prompt_text.as_bytes())[..8]);
        let input = self.scratch.join(format!("{tag}-in.png"));
        save_png(image, &input)?;
        let out = self.call_runner(Some(&input), &tag, prompt_text, params, seed);
        let _ = fs::remove_file(&input);
        out
    }
}

/// Where the reference checkpoints live and how to run edits.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// `mock` or `composed`.
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(default)]
    pub text_encoder_source: Option<String>,
    #[serde(default)]
    pub denoiser_source: Option<String>,
    #[serde(default)]
    pub autoencoder_source: Option<String>,
    /// The finetuned generator checkpoint.
    #[serde(default)]
    pub generator: Option<String>,
    /// The base img2img checkpoint whose autoencoder is the default.
    #[serde(default)]
    pub base: Option<String>,
    #[serde(default)]
    pub runner: Vec<String>,
}

fn default_kind() -> String {
    "mock".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub descriptor: BackendDescriptor,
    pub deviations: Vec<String>,
}

fn build_composed(config: &BackendConfig, scratch: &Path) -> Result<(ComposedBackend, CompositionReport), EditorError> {
    let need = |v: &Option<String>, name: &str| {
        v.clone()
            .ok_or_else(|| EditorError::Resolution(format!("{name} not configured")))
    };
    let generator = need(&config.generator, "generator")?;
    let base = need(&config.base, "base")?;
    let descriptor = BackendDescriptor {
        text_encoder_source: config.text_encoder_source.clone().unwrap_or(generator.clone()),
        denoiser_source: config.denoiser_source.clone().unwrap_or(generator.clone()),
        autoencoder_source: config.autoencoder_source.clone().unwrap_or(base.clone()),
    };
    check_shapes(&inspect_checkpoints(&descriptor)?)?;
    let deviations = descriptor.composition_deviations(&generator, &base);
    for d in &deviations {
        warn!("composition deviates from the reference recipe: {d}");
    }
    info!(
        "editing backend: text encoder {}, denoiser {}, autoencoder {}",
        descriptor.text_encoder_source, descriptor.denoiser_source, descriptor.autoencoder_source
    );
    if config.runner.is_empty() {
        return Err(EditorError::Resolution("composed backend needs a runner command".into()));
    }
    fs::create_dir_all(scratch).map_err(io_err(scratch))?;
    Ok((
        ComposedBackend {
            descriptor: descriptor.clone(),
            runner: config.runner.clone(),
            scratch: scratch.to_path_buf(),
        },
        CompositionReport {
            descriptor,
            deviations,
        },
    ))
}

/// Builds the backend named by the config and checks the composition rule.
/// Deviations from the reference composition are logged, not rejected.
pub fn compose_backend(
    config: &BackendConfig,
    scratch: &Path,
) -> Result<(Box<dyn EditingBackend>, CompositionReport), EditorError> {
    match config.kind.as_str() {
        "mock" => {
            info!("editing backend: built-in mock");
            Ok((
                Box::new(MockBackend::default()),
                CompositionReport {
                    descriptor: BackendDescriptor::mock(),
                    deviations: vec![],
                },
            ))
        }
        "composed" => {
            let (b, report) = build_composed(config, scratch)?;
            Ok((Box::new(b), report))
        }
        other => Err(EditorError::Argument(format!("unknown backend kind {other:?}"))),
    }
}

/// The text-to-image side of the same config: the toy generator for `mock`,
/// the runner for `composed`.
pub fn compose_generator(config: &BackendConfig, scratch: &Path) -> Result<Box<dyn GeneratorBackend>, EditorError> {
    match config.kind.as_str() {
        "mock" => Ok(Box::new(ToyGenerator::default())),
        "composed" => Ok(Box::new(build_composed(config, scratch)?.0)),
        other => Err(EditorError::Argument(format!("unknown backend kind {other:?}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RecordKind {
    /// A generated no-finding baseline.
    Baseline,
    Edit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RecordStatus {
    Ok,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRecord {
    pub output_id: String,
    pub kind: RecordKind,
    pub source_scan_id: String,
    /// Patient of the source scan; synthetic baselines are their own patient.
    pub source_patient_id: String,
    pub prompt: PromptSpec,
    pub params: EditorParams,
    pub seed: u64,
    pub replicate: u32,
    pub run_seed: u64,
    pub output_path: String,
    pub backend: BackendDescriptor,
    pub status: RecordStatus,
}

impl CounterfactualRecord {
    pub fn is_ok(&self) -> bool {
        self.status == RecordStatus::Ok
    }
}

/// Seed for one edit; a pure function of its identity.
pub fn derive_seed(source_scan_id: &str, pathology_key: &str, replicate: u32, run_seed: u64) -> u64 {
    stable_hash64(&[
        source_scan_id.as_bytes(),
        pathology_key.as_bytes(),
        &replicate.to_le_bytes(),
        &run_seed.to_le_bytes(),
    ])
}

fn output_id(kind: RecordKind, seed: u64) -> String {
    match kind {
        RecordKind::Baseline => format!("bl-{seed:016x}"),
        RecordKind::Edit => format!("cf-{seed:016x}"),
    }
}

fn record_output_id(kind: RecordKind, seed: u64, params: &EditorParams, run_params: &EditorParams) -> String {
    match kind {
        RecordKind::Edit if params != run_params => {
            // sweep cells share (scan, prompt, replicate); keep ids distinct
            let tag = stable_hash64(&[
                &seed.to_le_bytes(),
                &params.guidance_scale.to_le_bytes(),
                &params.strength.to_le_bytes(),
            ]);
            format!("cf-{tag:016x}")
        }
        _ => output_id(kind, seed),
    }
}

/// Seed and output id a record must carry given the run's parameters,
/// recomputed from its identity fields.
pub fn replay_identity(rec: &CounterfactualRecord, run_params: &EditorParams) -> (u64, String) {
    // generated baselines are seeded from their patient id before their
    // source id is replaced by their own output id
    let source = match rec.kind {
        RecordKind::Baseline => &rec.source_patient_id,
        RecordKind::Edit => &rec.source_scan_id,
    };
    let seed = derive_seed(source, rec.prompt.pathology_key.as_str(), rec.replicate, rec.run_seed);
    (seed, record_output_id(rec.kind, seed, &rec.params, run_params))
}

/// A source image to edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSource {
    pub scan_id: String,
    pub patient_id: String,
    pub image_path: String,
}

impl From<&crate::cohort::ScanRecord> for EditSource {
    fn from(s: &crate::cohort::ScanRecord) -> Self {
        EditSource {
            scan_id: s.scan_id.clone(),
            patient_id: s.patient_id.clone(),
            image_path: s.image_path.clone(),
        }
    }
}

/// Context shared by all jobs of one generation run.
pub struct EditContext<'a> {
    pub backend: &'a dyn EditingBackend,
    pub params: EditorParams,
    pub run_seed: u64,
    pub out_dir: PathBuf,
}

impl EditContext<'_> {
    fn record(&self, source: &EditSource, prompt: &PromptSpec, params: &EditorParams, replicate: u32, kind: RecordKind) -> CounterfactualRecord {
        let seed = derive_seed(&source.scan_id, prompt.pathology_key.as_str(), replicate, self.run_seed);
        let id = record_output_id(kind, seed, params, &self.params);
        CounterfactualRecord {
            output_path: self.out_dir.join("images").join(format!("{id}.png")).display().to_string(),
            output_id: id,
            kind,
            source_scan_id: source.scan_id.clone(),
            source_patient_id: source.patient_id.clone(),
            prompt: prompt.clone(),
            params: params.clone(),
            seed,
            replicate,
            run_seed: self.run_seed,
            backend: self.backend.descriptor().clone(),
            status: RecordStatus::Ok,
        }
    }

    fn run(&self, mut rec: CounterfactualRecord, source_image: Result<GrayImage, EditorError>) -> CounterfactualRecord {
        let result = source_image
            .and_then(|img| {
                self.backend
                    .edit(&img, &rec.prompt.prompt_text, &rec.params, rec.seed)
            })
            .and_then(|out| {
                if out.width() != rec.params.image_size || out.height() != rec.params.image_size {
                    return Err(EditorError::Backend(format!(
                        "output is {}x{}, configured {}",
                        out.width(),
                        out.height(),
                        rec.params.image_size
                    )));
                }
                save_png(&out, Path::new(&rec.output_path)).map_err(EditorError::from)
            });
        if let Err(e) = result {
            warn!("edit {} failed: {e}", rec.output_id);
            rec.status = RecordStatus::Failed {
                reason: e.to_string(),
            };
        }
        rec
    }

    /// Edits one source image; failures are recorded, not raised.
    pub fn edit_one(&self, source: &EditSource, prompt: &PromptSpec, replicate: u32) -> CounterfactualRecord {
        let rec = self.record(source, prompt, &self.params, replicate, RecordKind::Edit);
        self.run(rec, load_gray(Path::new(&source.image_path)).map_err(EditorError::from))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestKind {
    Eval,
    Training,
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub schema_version: u32,
    pub kind: ManifestKind,
    pub expected_records: usize,
    pub records: usize,
    pub failed: usize,
    pub complete: bool,
    pub run_seed: u64,
    pub params: EditorParams,
    /// SHA-256 of the JSONL body.
    pub content_hash: String,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub meta: ManifestMeta,
    pub records: Vec<CounterfactualRecord>,
}

pub fn manifest_jsonl(records: &[CounterfactualRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

impl Manifest {
    pub fn new(kind: ManifestKind, expected: usize, run_seed: u64, params: EditorParams, records: Vec<CounterfactualRecord>) -> Self {
        let failed = records.iter().filter(|r| !r.is_ok()).count();
        if failed > 0 {
            warn!("{failed} of {} records failed; manifest flagged incomplete", records.len());
        }
        let meta = ManifestMeta {
            schema_version: MANIFEST_SCHEMA_VERSION,
            kind,
            expected_records: expected,
            records: records.len(),
            failed,
            complete: failed == 0 && records.len() == expected,
            run_seed,
            params,
            content_hash: sha256_hex(manifest_jsonl(&records).as_bytes()),
            extra: BTreeMap::new(),
        };
        Manifest { meta, records }
    }

    /// Writes `<stem>.jsonl` and `<stem>.meta.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<PathBuf, EditorError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let body = dir.join(format!("{stem}.jsonl"));
        fs::write(&body, manifest_jsonl(&self.records)).map_err(io_err(&body))?;
        let meta = dir.join(format!("{stem}.meta.json"));
        fs::write(&meta, serde_json::to_string_pretty(&self.meta).expect("meta serializes"))
            .map_err(io_err(&meta))?;
        Ok(body)
    }

    pub fn read(body: &Path) -> Result<Manifest, EditorError> {
        let records = read_records(File::open(body).map_err(io_err(body))?)?;
        let meta_path = meta_path_for(body);
        let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
        let meta = serde_json::from_str(&text).map_err(|e| EditorError::Manifest {
            line: 0,
            message: format!("{}: {e}", meta_path.display()),
        })?;
        Ok(Manifest { meta, records })
    }
}

pub fn meta_path_for(body: &Path) -> PathBuf {
    let stem = body
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("manifest.jsonl")
        .trim_end_matches(".jsonl");
    body.with_file_name(format!("{stem}.meta.json"))
}

pub fn read_records<R: Read>(r: R) -> Result<Vec<CounterfactualRecord>, EditorError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line.map_err(|e| EditorError::Manifest {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EditorError::Manifest {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// One planned edit: source index, prompt, replicate and parameter overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub source: usize,
    pub prompt: usize,
    pub replicate: u32,
    pub guidance_scale: Option<f64>,
    pub strength: Option<f64>,
}

/// Scan-major, prompt-minor job order for the evaluation cohort.
pub fn plan_eval_jobs(n_sources: usize, n_prompts: usize) -> Vec<Job> {
    (0..n_sources)
        .flat_map(|s| {
            (0..n_prompts).map(move |p| Job {
                source: s,
                prompt: p,
                replicate: 0,
                guidance_scale: None,
                strength: None,
            })
        })
        .collect()
}

/// Edits for the training cohort: for each baseline, prompts x replicates.
pub fn plan_training_jobs(n_baselines: usize, n_prompts: usize, replicates: u32) -> Vec<Job> {
    (0..n_baselines)
        .flat_map(|s| {
            (0..n_prompts).flat_map(move |p| {
                (0..replicates).map(move |r| Job {
                    source: s,
                    prompt: p,
                    replicate: r,
                    guidance_scale: None,
                    strength: None,
                })
            })
        })
        .collect()
}

/// Review order: scan, prompt, guidance, strength.
pub fn plan_sweep_jobs(n_sources: usize, n_prompts: usize, guidance: &[f64], strength: &[f64]) -> Vec<Job> {
    let mut out = Vec::with_capacity(n_sources * n_prompts * guidance.len() * strength.len());
    for s in 0..n_sources {
        for p in 0..n_prompts {
            for &g in guidance {
                for &st in strength {
                    out.push(Job {
                        source: s,
                        prompt: p,
                        replicate: 0,
                        guidance_scale: Some(g),
                        strength: Some(st),
                    });
                }
            }
        }
    }
    out
}

/// `n` evenly spaced values from `a` to `b` inclusive.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n)
            .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

pub fn default_guidance_grid() -> Vec<f64> {
    linspace(1.5, 10.0, 10)
}

pub fn default_strength_grid() -> Vec<f64> {
    linspace(0.2, 1.0, 10)
}

/// One counterfactual per (scan, prompt).
pub fn generate_eval_cohort(
    ctx: &EditContext,
    sources: &[EditSource],
    prompts: &[PromptSpec],
    exec: Exec,
) -> Result<Manifest, EditorError> {
    ctx.params.validate()?;
    let jobs = plan_eval_jobs(sources.len(), prompts.len());
    let records = exec.map(&jobs, |j| ctx.edit_one(&sources[j.source], &prompts[j.prompt], j.replicate));
    Ok(Manifest::new(ManifestKind::Eval, jobs.len(), ctx.run_seed, ctx.params.clone(), records))
}

/// Generated baselines followed by their edits, baseline-major.
pub fn generate_training_cohort(
    ctx: &EditContext,
    generator: &dyn GeneratorBackend,
    n_baselines: usize,
    prompts: &[PromptSpec],
    replicates: u32,
    exec: Exec,
) -> Result<Manifest, EditorError> {
    ctx.params.validate()?;
    let nf = PromptSpec::no_finding();
    let sources: Vec<EditSource> = (0..n_baselines)
        .map(|i| EditSource {
            scan_id: format!("gen-{i:06}"),
            patient_id: format!("gen-{i:06}"),
            image_path: String::new(),
        })
        .collect();
    let baselines: Vec<CounterfactualRecord> = exec.map(&sources, |src| {
        let mut rec = ctx.record(src, &nf, &ctx.params, 0, RecordKind::Baseline);
        rec.source_scan_id = rec.output_id.clone();
        let img = generator.generate(NO_FINDING_PROMPT, ctx.params.image_size, rec.seed);
        let saved = img.and_then(|img| save_png(&img, Path::new(&rec.output_path)).map_err(EditorError::from));
        if let Err(e) = saved {
            rec.status = RecordStatus::Failed { reason: e.to_string() };
        }
        rec
    });
    let edit_sources: Vec<EditSource> = baselines
        .iter()
        .zip(&sources)
        .map(|(b, s)| EditSource {
            scan_id: b.output_id.clone(),
            patient_id: s.patient_id.clone(),
            image_path: b.output_path.clone(),
        })
        .collect();
    let jobs = plan_training_jobs(n_baselines, prompts.len(), replicates);
    let edits = exec.map(&jobs, |j| ctx.edit_one(&edit_sources[j.source], &prompts[j.prompt], j.replicate));

    let per = prompts.len() * replicates as usize;
    let mut records = Vec::with_capacity(baselines.len() + edits.len());
    let mut edits = edits.into_iter();
    for b in baselines {
        records.push(b);
        records.extend(edits.by_ref().take(per));
    }
    let expected = n_baselines + jobs.len();
    Ok(Manifest::new(ManifestKind::Training, expected, ctx.run_seed, ctx.params.clone(), records))
}

/// Full guidance x strength grid per (scan, prompt), plus a review index.
pub fn sweep_params(
    ctx: &EditContext,
    sources: &[EditSource],
    guidance_grid: &[f64],
    strength_grid: &[f64],
    prompts: &[PromptSpec],
    exec: Exec,
) -> Result<Manifest, EditorError> {
    if guidance_grid.is_empty() || strength_grid.is_empty() {
        return Err(EditorError::Argument("sweep grids must be nonempty".into()));
    }
    let jobs = plan_sweep_jobs(sources.len(), prompts.len(), guidance_grid, strength_grid);
    let records = exec.map(&jobs, |j| {
        let params = EditorParams {
            guidance_scale: j.guidance_scale.unwrap_or(ctx.params.guidance_scale),
            strength: j.strength.unwrap_or(ctx.params.strength),
            ..ctx.params.clone()
        };
        let rec = ctx.record(&sources[j.source], &prompts[j.prompt], &params, j.replicate, RecordKind::Edit);
        if let Err(e) = params.validate() {
            let mut rec = rec;
            rec.status = RecordStatus::Failed { reason: e.to_string() };
            return rec;
        }
        ctx.run(rec, load_gray(Path::new(&sources[j.source].image_path)).map_err(EditorError::from))
    });
    Ok(Manifest::new(ManifestKind::Sweep, jobs.len(), ctx.run_seed, ctx.params.clone(), records))
}

/// CSV index of a sweep for human review, in job order.
pub fn write_sweep_index<W: Write>(w: W, records: &[CounterfactualRecord]) -> Result<(), EditorError> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| EditorError::Argument(e.to_string());
    out.write_record([
        "order",
        "source_scan_id",
        "pathology_key",
        "prompt_text",
        "guidance_scale",
        "strength",
        "output_path",
        "status",
    ])
    .map_err(csv_err)?;
    for (i, r) in records.iter().enumerate() {
        out.write_record([
            i.to_string(),
            r.source_scan_id.clone(),
            r.prompt.pathology_key.to_string(),
            r.prompt.prompt_text.clone(),
            r.params.guidance_scale.to_string(),
            r.params.strength.to_string(),
            r.output_path.clone(),
            if r.is_ok() { "OK".into() } else { "FAILED".into() },
        ])
        .map_err(csv_err)?;
    }
    out.flush().map_err(|e| EditorError::Argument(e.to_string()))
}
