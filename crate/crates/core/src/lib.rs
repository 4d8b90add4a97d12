//! Counterfactual chest-radiograph tooling: cohort ingestion, a pluggable
//! editing pipeline, shortcut stress tests, a blinded reader study,
//! identity preservation scoring and counterfactual-augmented training.
//!
//! Every op that fans out over images takes an [`exec::Exec`]; with the
//! `parallel` feature (default) it can run on rayon, otherwise it is
//! always sequential.

pub mod cohort;
pub mod exec;
pub mod findings;
pub mod hashing;
pub mod imaging;
pub mod labels;
pub mod matrix;
pub mod stats;
pub mod toy;
pub mod editor;
pub mod nn;
pub mod stress;
pub mod augtrain;
pub mod reader;
pub mod identity;
pub mod adapters;
pub mod reports;
pub mod toy_demo;

/// Any error from this crate, for callers that drive several modules.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Cohort(#[from] cohort::CohortError),
    #[error(transparent)]
    Editor(#[from] editor::EditorError),
    #[error(transparent)]
    Stress(#[from] stress::StressError),
    #[error(transparent)]
    Train(#[from] augtrain::AugError),
    #[error(transparent)]
    Reader(#[from] reader::ReaderError),
    #[error(transparent)]
    Identity(#[from] identity::IdentityError),
    #[error(transparent)]
    Report(#[from] reports::ReportError),
    #[error(transparent)]
    Demo(#[from] toy_demo::DemoError),
    #[error(transparent)]
    Matrix(#[from] matrix::MatrixError),
    #[error(transparent)]
    Stats(#[from] stats::StatsError),
    #[error(transparent)]
    Image(#[from] imaging::ImageError),
}
