//! Nest-at-high-level (NHL) classification networks.
//!
//! A shared convolutional trunk feeds branch blocks nested along a category
//! taxonomy; every category's logit comes from the branch chain of its own
//! ancestors. Because branches only meet in the logit vector, any subset of
//! categories can be served by an expert that keeps just the trunk and the
//! branches on its ancestor paths, with unchanged logits and no retraining.

pub mod cost;
pub mod expert;
pub mod pipeline;
pub mod runtime;
pub mod taxonomy;
pub mod topology;

use thiserror::Error;

/// Any error the library can report, with a process exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Taxonomy(#[from] taxonomy::TaxonomyError),
    #[error(transparent)]
    Topology(#[from] topology::TopologyError),
    #[error(transparent)]
    Cost(#[from] cost::CostError),
    #[error(transparent)]
    Runtime(#[from] runtime::RuntimeError),
    #[error(transparent)]
    Expert(#[from] expert::ExpertError),
    #[error(transparent)]
    Pipeline(#[from] pipeline::PipelineError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    /// 2 for I/O failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        use pipeline::{CheckpointError, DataError, PipelineError};
        match self {
            Error::Io { .. }
            | Error::Pipeline(PipelineError::Data(DataError::Io { .. }))
            | Error::Pipeline(PipelineError::Checkpoint(CheckpointError::Io { .. })) => 2,
            _ => 1,
        }
    }
}

impl From<pipeline::CheckpointError> for Error {
    fn from(e: pipeline::CheckpointError) -> Self {
        Error::Pipeline(e.into())
    }
}

impl From<pipeline::DataError> for Error {
    fn from(e: pipeline::DataError) -> Self {
        Error::Pipeline(e.into())
    }
}
