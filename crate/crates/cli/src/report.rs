//! render, validate. Both work on an existing run directory in place.

use std::path::PathBuf;

use anyhow::Result;
use cfaudit_core::reports::{render_reports, validate_manifests};

use crate::{Ctx, Outcome};

#[derive(clap::Args, Debug)]
pub struct RenderArgs {
    /// Run directory to render into <dir>/reports.
    pub dir: PathBuf,
}

pub fn render(ctx: &Ctx, a: RenderArgs) -> Result<Outcome> {
    let report = render_reports(&ctx.input(&a.dir))?;
    for p in &report.rendered {
        println!("{}", p.display());
    }
    for m in &report.missing {
        log::info!("nothing matching {m}");
    }
    Ok(Outcome::Ok)
}

#[derive(clap::Args, Debug)]
pub struct ValidateArgs {
    /// Run directory holding one or more manifests.
    pub dir: PathBuf,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

pub fn validate(ctx: &Ctx, a: ValidateArgs) -> Result<Outcome> {
    let report = validate_manifests(&ctx.input(&a.dir));
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for m in &report.manifests {
            println!("{}: {} of {} records, {} failed", m.manifest, m.records, m.expected, m.failed);
        }
        for i in &report.issues {
            let line = i.line.map(|l| format!(":{l}")).unwrap_or_default();
            println!("{}{line}: {:?}: {}", i.manifest, i.kind, i.message);
        }
    }
    Ok(if report.is_ok() { Outcome::Ok } else { Outcome::Violations })
}
