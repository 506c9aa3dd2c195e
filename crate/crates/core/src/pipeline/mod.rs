//! End-to-end orchestration: configuration, seeded per-stage randomness,
//! checkpointed and resumable runs, turntable rendering and self-checks.

mod checks;
mod config;
mod run;
mod turntable;

pub use checks::{run_checks, CheckOptions, CheckReport, SuiteReport, SUITES};
pub use config::{
    AnalyticPrior, Backend, GuidanceConfig, InitConfig, PipelineConfig, TexturingConfig, TurntableConfig,
};
pub use run::{
    extract_mesh, load_atlas, retexture_mesh, run_generate, save_atlas, stage_rng, Manifest, RetextureOutcome,
    RunOptions, RunOutcome, Stage, StageRecord, MANIFEST_FILE,
};
pub use turntable::run_turntable;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("mesh extraction produced no surface at iso level 0")]
    EmptyMesh,
    #[error(transparent)]
    Field(#[from] crate::field::FieldError),
    #[error(transparent)]
    Sds(#[from] crate::sds::SdsError),
    #[error(transparent)]
    Mesh(#[from] crate::meshing::MeshError),
    #[error(transparent)]
    Retexture(#[from] crate::retexture::RetextureError),
    #[error(transparent)]
    Tex(#[from] crate::texrast::TexError),
    #[error(transparent)]
    Guidance(#[from] crate::guidance::GuidanceError),
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
