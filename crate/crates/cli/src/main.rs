//! `cfaudit`: one entry point for every stage of the workflow.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

mod data;
mod model;
mod report;
mod run;
mod study;

use cfaudit_core::exec::Exec;

#[derive(Parser, Debug)]
#[command(name = "cfaudit", version, about = "Counterfactual chest-radiograph cohorts, stress tests, reader studies and training")]
struct Cli {
    /// Base for relative input paths and the default runs directory.
    #[arg(long, global = true, env = "CFAUDIT_DATA_ROOT", default_value = ".")]
    data_root: PathBuf,
    /// Where content-addressed run directories go (default: <data-root>/runs).
    #[arg(long, global = true)]
    runs_dir: Option<PathBuf>,
    /// Disable data parallelism.
    #[arg(long, global = true)]
    sequential: bool,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse cohort metadata into a normalized manifest, split and no-finding sample.
    Ingest(data::IngestArgs),
    /// Generate an evaluation or training counterfactual cohort.
    Generate(data::GenerateArgs),
    /// Editor parameter sweep, or the small-scale training sweep.
    Sweep(data::SweepArgs),
    /// Set up reader sessions and serve the blinded reader study.
    ReaderServe(study::ServeArgs),
    /// Export reads, per-session sheets and the realism summary.
    ReaderExport(study::ExportArgs),
    /// Identity preservation scores for CONTROL, MODEL and REAL pairs.
    Pfid(study::PfidArgs),
    /// Prompted-vs-read co-occurrence matrix from reads.
    Cooccur(study::CooccurArgs),
    /// Shortcut stress test: percentile change matrix for one classifier.
    Stress(model::StressArgs),
    /// Train a classifier on real plus counterfactual data.
    Train(model::TrainArgs),
    /// AUC of a model or adapter on one or more cohorts.
    Evaluate(model::EvaluateArgs),
    /// End-to-end toy shortcut experiment.
    ToyDemo(model::ToyDemoArgs),
    /// Render heatmaps and tables for a run directory.
    Render(report::RenderArgs),
    /// Check manifests in a run directory.
    Validate(report::ValidateArgs),
}

pub struct Ctx {
    pub data_root: PathBuf,
    pub runs_root: PathBuf,
    pub exec: Exec,
}

impl Ctx {
    pub fn input(&self, p: &std::path::Path) -> PathBuf {
        run::resolve(&self.data_root, p)
    }

    /// Parsed arguments with the `--config` file, if any, merged in.
    pub fn merge<T>(&self, args: &T, matches: &clap::ArgMatches, common: &Common) -> anyhow::Result<T>
    where
        T: serde::Serialize + serde::de::DeserializeOwned,
    {
        let file = common.config.as_deref().map(|p| self.input(p));
        run::merge_config(args, matches, file.as_deref())
    }
}

/// Outcome of a subcommand that ran to completion.
pub enum Outcome {
    Ok,
    /// Ran, but found what it was asked to check for (e.g. manifest issues).
    Violations,
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            // help and version print to stdout and succeed; the rest is usage
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let ctx = Ctx {
        runs_root: cli.runs_dir.clone().unwrap_or_else(|| cli.data_root.join("runs")),
        data_root: cli.data_root.clone(),
        exec: if cli.sequential { Exec::Sequential } else { Exec::default() },
    };
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    let result = match cli.command {
        Command::Ingest(a) => data::ingest(&ctx, a, sub),
        Command::Generate(a) => data::generate(&ctx, a, sub),
        Command::Sweep(a) => data::sweep(&ctx, a, sub),
        Command::ReaderServe(a) => study::reader_serve(&ctx, a, sub),
        Command::ReaderExport(a) => study::reader_export(&ctx, a, sub),
        Command::Pfid(a) => study::pfid(&ctx, a, sub),
        Command::Cooccur(a) => study::cooccur(&ctx, a, sub),
        Command::Stress(a) => model::stress(&ctx, a, sub),
        Command::Train(a) => model::train(&ctx, a, sub),
        Command::Evaluate(a) => model::evaluate(&ctx, a, sub),
        Command::ToyDemo(a) => model::toy_demo(&ctx, a, sub),
        Command::Render(a) => report::render(&ctx, a),
        Command::Validate(a) => report::validate(&ctx, a),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Violations) => ExitCode::from(1),
        Err(e) => {
            if let Some(u) = e.downcast_ref::<UsageError>() {
                eprintln!("error: {u}");
                eprintln!("{}", Cli::command().render_usage());
                return ExitCode::from(2);
            }
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// A missing or inconsistent option, reported with usage text and exit 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Options shared by every subcommand that writes a run directory.
#[derive(clap::Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML file with option values; flags on the command line take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Exact run directory instead of the content-addressed default.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Rerun even if an identical complete run exists.
    #[arg(long)]
    pub force: bool,
}

/// Freezes `cfg` into its run directory; `None` means nothing to do.
pub fn start_run<T: serde::Serialize>(ctx: &Ctx, command: &str, cfg: &T, common: &Common) -> anyhow::Result<Option<run::Run>> {
    let value = serde_json::to_value(cfg)?;
    let out = common.out.as_deref().map(|p| ctx.input(p));
    let dir = run::run_dir_for(&ctx.runs_root, out.as_deref(), command, &value);
    let run = run::prepare(&dir, command, &value, common.force)?;
    if run.is_none() {
        println!("up to date: {} (use --force to rerun)", dir.display());
    } else {
        log::info!("run directory {}", dir.display());
    }
    Ok(run)
}

pub fn finish_run(run: run::Run) -> anyhow::Result<Outcome> {
    let dir = run.finish()?;
    println!("{}", dir.display());
    Ok(Outcome::Ok)
}
