use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("voxel data length {actual} does not match grid size {expected}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("non-finite value at voxel {0}")]
    NonFinite(usize),

    #[error("probability {value} at voxel {index} is outside [0, 1]")]
    NotAProbability { index: usize, value: f64 },

    #[error("volumes do not share the same grid")]
    MetaMismatch,

    #[error("mask has no foreground voxels")]
    EmptyMask,

    #[error("crop box {lo:?}..{hi:?} is outside grid of shape {shape:?}")]
    OutOfBounds { lo: [usize; 3], hi: [usize; 3], shape: [usize; 3] },

    #[error("bounding box does not overlap the volume")]
    NoOverlap,

    #[error("bad target spacing {0:?}")]
    BadSpacing([f64; 3]),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("ensemble needs at least two members, got {0}")]
    TooFewMembers(usize),

    #[error("empty input")]
    EmptyInput,

    #[error(transparent)]
    Nifti(#[from] crate::io::NiftiError),

    #[error(transparent)]
    BBox(#[from] crate::io::BBoxError),

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
