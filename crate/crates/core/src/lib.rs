//! Multi-rater label fusion.
//!
//! Estimates a consensus lesion map and per-rater sensitivity/specificity
//! from binary or soft expert annotations (binary STAPLE, exact soft STAPLE,
//! simplified soft STAPLE), builds soft masks from binary delineations using
//! an intensity volume, and scores masks with a soft Dice metric.

pub mod em;
pub mod error;
pub mod metrics;
pub mod rng;
pub mod soft;
pub mod softmask;
pub mod staple;
pub mod svol;
pub mod synth;
pub mod volume;

pub use em::IterationView;
pub use error::{Error, PosteriorSide, Result};
pub use soft::{fuse, run_soft_em, run_soft_em_observed};
pub use staple::{
    binarize, run_em, run_em_observed, FusionConfig, FusionResult, MStepMode, Prior, RaterParams,
    Variant,
};
pub use svol::{read_svol, write_svol};
pub use volume::{linear_index, validate_stack, Dim3, ExpertStack, VolumeGrid, VolumeKind};
