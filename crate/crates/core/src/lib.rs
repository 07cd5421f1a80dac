//! Uncertainty-rectified promptable segmentation.
//!
//! A bounding-box prompt is perturbed into several augmented prompts, each one
//! is sent to a promptable segmentation backend, and the per-voxel predictions
//! are averaged. The binary predictive entropy of that average marks uncertain
//! voxels (selected with a threshold that adapts to the mask-to-box area
//! ratio), and uncertain voxels are then re-labelled by comparing their
//! intensity with the mean intensity of the confidently segmented target.
//!
//! The numeric modules are generic over [`Scalar`] (`f32` and `f64`); the
//! aliases below name the concrete instantiations used by the pipeline and
//! the on-disk format.

pub mod cli;
pub mod eval;
pub mod phantom;
pub mod pipeline;
pub mod prompt;
pub mod rectify;
pub mod rng;
pub mod scalar;
pub mod segmenter;
pub mod uncertainty;
pub mod volume;

pub use scalar::Scalar;
pub use volume::{BinaryMask, Dims, Grid, ProbMap, Spacing, UncertaintyMap, Volume};

pub type Volume32 = Volume<f32>;
pub type Volume64 = Volume<f64>;
pub type ProbMap32 = ProbMap<f32>;
pub type ProbMap64 = ProbMap<f64>;
pub type UncertaintyMap32 = UncertaintyMap<f32>;
pub type UncertaintyMap64 = UncertaintyMap<f64>;
