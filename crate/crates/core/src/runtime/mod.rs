//! Dense CPU runtime: layer kernels with their backward passes, and graph
//! execution on top of them.

pub mod conv;
mod exec;
pub mod gradcheck;
pub mod norm;
pub mod ops;
mod optim;
pub mod parallel;
mod params;
mod tensor;

use thiserror::Error;

use crate::topology::TopologyError;

pub use exec::{backward, forward, infer, ForwardPass, Tape};
pub use norm::Mode;
pub use optim::{adam_step, sgd_step, AdamConfig, SgdConfig};
pub use params::{
    he_init, init_parameters, parameter_manifest, GradientStore, ParamRole, ParamSpec,
    ParameterStore,
};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{channels} input / {out_channels} output channels not divisible by {groups} groups")]
    GroupMismatch {
        channels: usize,
        out_channels: usize,
        groups: usize,
    },
    #[error("operation produces an empty spatial output")]
    NonPositiveSpatial,
    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("parameter keys differ: {0}")]
    KeyMismatch(String),
    #[error("graph has no inferred shapes")]
    ShapesMissing,
    #[error("parameter mismatch: {0}")]
    ParameterMismatch(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}
