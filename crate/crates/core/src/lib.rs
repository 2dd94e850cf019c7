//! Prognosis prediction from multi-magnification whole-slide images.
//!
//! Slides are stored as image pyramids. A lesion mask restricts where
//! patches are drawn; patches cut at several magnifications around a shared
//! center are embedded, concatenated and classified by an MLP, and
//! per-patch predictions are aggregated into a patient score that is
//! thresholded into a good or bad prognosis.

pub mod classifier;
pub mod cohort;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod masking;
pub mod patching;
pub mod pipeline;
pub mod pyramid;
pub mod seeds;

pub use error::{Error, Result};
pub use exec::Parallelism;
pub use pyramid::{Magnification, PrognosisLabel};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
