//! reader-serve, reader-export, cooccur, pfid.

use std::collections::HashMap;
use std::fs::{self, File};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cfaudit_core::editor::{Manifest, RecordKind};
use cfaudit_core::findings::FindingKey;
use cfaudit_core::hashing::sha256_hex;
use cfaudit_core::identity::{
    build_pairings, score_pairings, write_scores_csv, write_summary_table, EmbeddingCache, PairKind, PairingInputs,
    ToyEmbedder,
};
use cfaudit_core::reader::{
    assign_reads, compute_read_cooccurrence, read_reads_csv, read_session_csv, reads_from_session_csv,
    realism_summary, write_reads_csv, AssignMode, ReaderStore, UnsurePolicy,
};
use clap::{ArgMatches, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{create, load_scans, parse_findings, write_json};
use crate::{finish_run, start_run, usage, Common, Ctx, Outcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Disjoint,
    Overlapping,
}

/// Serves a persistent reader store. The store directory is the state, so
/// this command does not create a run directory.
#[derive(clap::Args, Debug)]
pub struct ServeArgs {
    /// Reader store directory (created if missing).
    #[arg(long)]
    pub store: PathBuf,
    /// Counterfactual manifest to assign sessions from before serving.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Reader ids, one session each.
    #[arg(long, value_delimiter = ',')]
    pub readers: Vec<String>,
    #[arg(long, default_value_t = 100)]
    pub per_reader: usize,
    #[arg(long, value_enum, default_value = "disjoint")]
    pub mode: Mode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Bearer token required on /admin routes.
    #[arg(long, env = "CFAUDIT_ADMIN_TOKEN", hide_env_values = true)]
    pub admin_token: Option<String>,
    /// Install sessions and exit without serving.
    #[arg(long)]
    pub no_serve: bool,
}

pub fn reader_serve(ctx: &Ctx, a: ServeArgs, _m: &ArgMatches) -> Result<Outcome> {
    let dir = ctx.input(&a.store);
    if let Some(mp) = &a.manifest {
        if a.readers.is_empty() {
            return Err(usage("--manifest needs --readers"));
        }
        let manifest = Manifest::read(&ctx.input(mp))?;
        let edits: Vec<_> = manifest
            .records
            .iter()
            .filter(|r| r.is_ok() && r.kind == RecordKind::Edit)
            .collect();
        let ids: Vec<String> = edits.iter().map(|r| r.output_id.clone()).collect();
        let images: HashMap<String, String> = edits
            .iter()
            .map(|r| (r.output_id.clone(), r.output_path.clone()))
            .collect();
        let mode = match a.mode {
            Mode::Disjoint => AssignMode::Disjoint,
            Mode::Overlapping => AssignMode::Overlapping,
        };
        let sessions = assign_reads(&ids, &a.readers, a.per_reader, a.seed, mode)?;
        let store = ReaderStore::open(&dir)?;
        for info in store.install(&sessions, &images)? {
            println!("{}\t{}\thttp://{}/session/{}/next", info.reader_id, info.session_id, a.addr, info.session_id);
        }
    }
    if a.no_serve {
        return Ok(Outcome::Ok);
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(cfaudit_reader_server::serve(&dir, a.addr, a.admin_token))?;
    Ok(Outcome::Ok)
}

#[derive(clap::Args, Debug, Serialize, Deserialize)]
pub struct ExportArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// Reader store directory.
    #[arg(long)]
    pub store: PathBuf,
    /// Offline session sheets to merge in, as SESSION_ID=CSV.
    #[arg(long = "sheet")]
    pub sheets: Vec<String>,
    /// Hash of the reads at export time; set automatically.
    #[arg(skip)]
    pub reads_sha256: String,
}

pub fn reader_export(ctx: &Ctx, args: ExportArgs, m: &ArgMatches) -> Result<Outcome> {
    let mut a = ctx.merge(&args, m, &args.common)?;
    a.store = ctx.input(&a.store);
    let store = ReaderStore::open(&a.store)?;
    let mut reads = store.reads()?;
    for s in &a.sheets {
        let (sid, path) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("--sheet expects SESSION_ID=CSV, got {s:?}")))?;
        let path = ctx.input(Path::new(path));
        let rows = read_session_csv(File::open(&path).with_context(|| format!("opening {}", path.display()))?)?;
        let session = store.session(sid)?;
        let offline = reads_from_session_csv(&rows, &session)?;
        // offline sheets only fill scans the server has no read for
        let have: std::collections::HashSet<(String, String)> =
            reads.iter().map(|r| (r.reader_id.clone(), r.output_id.clone())).collect();
        reads.extend(
            offline
                .into_iter()
                .filter(|r| !have.contains(&(r.reader_id.clone(), r.output_id.clone()))),
        );
    }
    reads.sort_by(|x, y| (&x.reader_id, &x.output_id).cmp(&(&y.reader_id, &y.output_id)));
    let mut body = vec![];
    write_reads_csv(&mut body, &reads)?;
    a.reads_sha256 = sha256_hex(&body);
    let Some(run) = start_run(ctx, "reader-export", &a, &args.common)? else {
        return Ok(Outcome::Ok);
    };
    fs::write(run.path("reads.csv"), &body)?;
    let sessions_dir = run.path("sessions");
    fs::create_dir_all(&sessions_dir)?;
    for info in store.sessions()? {
        let f = create(&sessions_dir.join(format!("{}.csv", info.reader_id)))?;
        store.export_session_csv(&info.session_id, f)?;
    }
    if reads.is_empty() {
        log::warn!("no reads yet; realism summary skipped");
    } else {
        realism_summary(&reads)?.write_csv(create(&run.path("realism_summary.csv"))?)?;
    }
    log::info!("{} reads exported", reads.len());
    finish_run(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    AsAbsent,
    AsPresent,
    Exclude,
}

#[derive(clap::Args, Debug, Serialize, Deserialize)]
pub struct CooccurArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// reads.csv from reader-export.
    #[arg(long)]
    pub reads: PathBuf,
    /// The counterfactual manifest the reads were made on.
    #[arg(long)]
    pub manifest: PathBuf,
    /// How unsure reads count.
    #[arg(long, value_enum, default_value = "as-absent")]
    pub unsure: Policy,
    /// A real_cooccurrence.csv to place next to the read matrix in reports.
    #[arg(long)]
    pub real: Option<PathBuf>,
}

pub fn cooccur(ctx: &Ctx, args: CooccurArgs, m: &ArgMatches) -> Result<Outcome> {
    let mut a = ctx.merge(&args, m, &args.common)?;
    a.reads = ctx.input(&a.reads);
    a.manifest = ctx.input(&a.manifest);
    a.real = a.real.map(|p| ctx.input(&p));
    let reads = read_reads_csv(File::open(&a.reads).with_context(|| format!("opening {}", a.reads.display()))?)?;
    let manifest = Manifest::read(&a.manifest)?;
    let Some(run) = start_run(ctx, "cooccur", &a, &args.common)? else {
        return Ok(Outcome::Ok);
    };
    let prompts: HashMap<String, FindingKey> = manifest
        .records
        .iter()
        .map(|r| (r.output_id.clone(), r.prompt.pathology_key.clone()))
        .collect();
    let policy = match a.unsure {
        Policy::AsAbsent => UnsurePolicy::AsAbsent,
        Policy::AsPresent => UnsurePolicy::AsPresent,
        Policy::Exclude => UnsurePolicy::Exclude,
    };
    let mat = compute_read_cooccurrence(&reads, &prompts, policy)?;
    mat.write_csv(create(&run.path("read_cooccurrence.csv"))?)?;
    if let Some(real) = &a.real {
        fs::copy(real, run.path("real_cooccurrence.csv")).with_context(|| format!("copying {}", real.display()))?;
    }
    finish_run(run)
}

#[derive(clap::Args, Debug, Serialize, Deserialize)]
pub struct PfidArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub common: Common,
    /// Counterfactual manifest (MODEL and CONTROL pairs).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// The scans the manifest was edited from, mapping source ids to images.
    #[arg(long)]
    pub sources: Option<PathBuf>,
    /// Dated cohort JSONL for REAL pairs.
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    /// Conditions to pair on (default: the six study findings).
    #[arg(long, value_delimiter = ',')]
    pub conditions: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values = ["CONTROL", "MODEL", "REAL"])]
    pub kinds: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Embedding cache directory (default: inside the run directory).
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

pub fn pfid(ctx: &Ctx, args: PfidArgs, m: &ArgMatches) -> Result<Outcome> {
    let mut a = ctx.merge(&args, m, &args.common)?;
    for p in [&mut a.manifest, &mut a.sources, &mut a.cohort, &mut a.cache] {
        *p = p.take().map(|p| ctx.input(&p));
    }
    let kinds: Vec<PairKind> = a
        .kinds
        .iter()
        .map(|k| {
            serde_json::from_value(serde_json::Value::String(k.to_ascii_uppercase()))
                .map_err(|_| usage(format!("unknown pair kind {k:?}")))
        })
        .collect::<Result<_>>()?;
    let needs_manifest = kinds.iter().any(|k| *k != PairKind::Real);
    if needs_manifest && a.manifest.is_none() {
        return Err(usage("CONTROL and MODEL pairs need --manifest"));
    }
    if kinds.contains(&PairKind::Real) && a.cohort.is_none() {
        return Err(usage("REAL pairs need --cohort"));
    }
    let conditions = if a.conditions.is_empty() {
        cfaudit_core::findings::study_findings()
    } else {
        parse_findings(&a.conditions)
    };
    let records = match &a.manifest {
        Some(p) => Manifest::read(p)?.records,
        None => vec![],
    };
    let mut baseline_paths = HashMap::new();
    if let Some(p) = &a.sources {
        for s in load_scans(p)? {
            baseline_paths.insert(s.scan.scan_id.clone(), s.scan.image_path.clone());
        }
    }
    let scans = match &a.cohort {
        Some(p) => load_scans(p)?,
        None => vec![],
    };
    let Some(run) = start_run(ctx, "pfid", &a, &args.common)? else {
        return Ok(Outcome::Ok);
    };
    let inputs = PairingInputs {
        scans: &scans,
        records: &records,
        baseline_paths: &baseline_paths,
    };
    let mut pairs = vec![];
    for c in &conditions {
        for k in &kinds {
            pairs.extend(build_pairings(inputs, c, *k, a.seed));
        }
    }
    let cache = EmbeddingCache::new(a.cache.clone().unwrap_or_else(|| run.path("embeddings")));
    let embedder = ToyEmbedder::new(16, 64, 0);
    let report = score_pairings(&pairs, &embedder, Some(&cache), ctx.exec);
    write_scores_csv(create(&run.path("pfid_scores.csv"))?, &report.scores)?;
    write_summary_table(create(&run.path("pfid_summary.csv"))?, &report.summaries)?;
    if !report.skipped.is_empty() {
        log::warn!("{} pairs skipped", report.skipped.len());
        write_json(&run.path("pfid_skipped.json"), &report.skipped)?;
    }
    log::info!("{} pairs scored", report.scores.len());
    finish_run(run)
}
