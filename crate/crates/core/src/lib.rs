//! Training-free layout guidance for a text-conditioned denoiser.
//!
//! The latent is nudged along the gradient of two attention losses so that
//! every object's cross-attention lands inside its box:
//!
//! - [`diffmath`]: dense matrices and a reverse-mode tape
//! - [`layout`]: layout documents and box rasterization
//! - [`backbone`]: a deterministic toy cross-attention denoiser
//! - [`guidance`]: the layout losses, schedule and guided sampler
//! - [`evaluate`]: label decoding, region detection, metrics, benchmark
//! - [`cli`]: the `loco` command-line tool

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod backbone;
pub mod cli;
pub mod diffmath;
pub mod evaluate;
pub mod gradcheck;
pub mod guidance;
pub mod layout;

pub use backbone::{AttentionMaps, Backbone, BackboneConfig, LatentState};
pub use diffmath::{DenseMatrix, MathError, Tape};
pub use evaluate::{BenchReport, LabelMap};
pub use guidance::{guided_sample, GuidanceConfig, LossBreakdown, Trajectory};
pub use layout::{parse_layout, BoundingBox, Layout, LayoutError, Mask};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    InFile { path: PathBuf, source: Box<Error> },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
