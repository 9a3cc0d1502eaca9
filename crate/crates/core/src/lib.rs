//! Monte Carlo dropout uncertainty for 3D lesion segmentation.
//!
//! The crate turns a stack of stochastic segmentation samples into voxel-wise
//! uncertainty maps (predictive entropy, mutual information, MC sample
//! variance, learned predictive variance), aggregates them into lesion-level
//! uncertainties, and scores lesion detection when uncertain predictions are
//! filtered out. A synthetic phantom generator and a toy dropout network act
//! as sample sources.

pub mod aggregate;
pub mod error;
pub mod lesion;
pub mod measures;
pub mod metrics;
pub mod phantom;
pub mod rng;
pub mod roc;
pub mod scene;
pub mod toynet;
pub mod uvol;
pub mod volume;

pub use error::{Error, Result};
pub use lesion::{Lesion, LesionSet, SizeBin};
pub use measures::{Measure, UncertaintyMaps};
pub use metrics::{Counts, DetectionRates, MatchResult};
pub use volume::{mean_prediction, Dims, GridKind, LabelMask, SampleStack, VoxelGrid};
