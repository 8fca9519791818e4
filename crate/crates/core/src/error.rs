use std::io;

use crate::volume::{Dim3, VolumeKind};

pub type Result<T> = std::result::Result<T, Error>;

/// Which class of the posterior lost all of its mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosteriorSide {
    /// `sum_t w_t(1) == 0`, sensitivity is undefined.
    Lesion,
    /// `sum_t w_t(0) == 0`, specificity is undefined.
    Background,
}

impl std::fmt::Display for PosteriorSide {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PosteriorSide::Lesion => {
                write!(f, "lesion posterior mass is zero (sensitivity undefined)")
            }
            PosteriorSide::Background => {
                write!(
                    f,
                    "background posterior mass is zero (specificity undefined)"
                )
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("voxel ({ix}, {iy}, {iz}) is outside grid {dims}")]
    IndexOutOfRange {
        ix: usize,
        iy: usize,
        iz: usize,
        dims: Dim3,
    },

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("data length {actual} does not match {dims} ({expected} voxels)")]
    LengthMismatch {
        dims: Dim3,
        expected: usize,
        actual: usize,
    },

    #[error("value {value} at voxel {index} violates the {kind} range")]
    RangeViolation {
        kind: VolumeKind,
        index: usize,
        value: f64,
    },

    #[error("bad SVOL magic {0:02x?}")]
    BadMagic(Vec<u8>),

    #[error("SVOL header mismatch: {0}")]
    HeaderMismatch(String),

    #[error("truncated SVOL file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("grid dimensions differ: {expected} vs {actual}")]
    DimensionMismatch { expected: Dim3, actual: Dim3 },

    #[error("expert grids mix kinds {first} and {other}")]
    MixedKinds {
        first: VolumeKind,
        other: VolumeKind,
    },

    #[error("expert kind must be binary or soft, found {0}")]
    UnsupportedExpertKind(VolumeKind),

    #[error("duplicate expert id {0:?}")]
    DuplicateExpertId(String),

    #[error("expert stack is empty")]
    EmptyStack,

    #[error("{0} expert ids for {1} grids")]
    IdCountMismatch(usize, usize),

    #[error("expected {expected} grid, found {actual}")]
    WrongKind {
        expected: &'static str,
        actual: VolumeKind,
    },

    #[error("expected {expected} experts, found {actual}")]
    ExpertCountMismatch { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("exact enumeration over {experts} experts exceeds the guard of {guard}; use the Monte Carlo variant")]
    Capacity { experts: usize, guard: usize },

    #[error("degenerate posterior: {side}")]
    DegeneratePosterior { side: PosteriorSide },

    #[error("degenerate posterior at iteration {iteration}: {side}")]
    EmAborted {
        side: PosteriorSide,
        iteration: usize,
        /// Objective values recorded before the failure.
        trace: Vec<f64>,
    },

    #[error("lesion {index} (center {center:?}, radius {radius}) does not fit in {dims}")]
    LesionOutOfBounds {
        index: usize,
        center: [usize; 3],
        radius: f64,
        dims: Dim3,
    },

    #[error("invalid SVOL header: {0}")]
    HeaderJson(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}
