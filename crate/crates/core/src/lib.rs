//! Hybrid CNN / selective-scan volumetric segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: a small dense tensor engine with tape-free reverse-mode
//!   differentiation (every result keeps its parents alive only while
//!   gradients are being tracked).
//! - [`paths`]: the 48 continuous traversal orders of a 3D grid.
//! - [`s6`]: the input-dependent selective-scan recurrence, with a
//!   sequential kernel, a parallel associative-scan kernel and analytic
//!   gradients.
//! - [`blocks`]: SS3D, the VSS3D block and the tri-oriented comparator.
//! - [`network`]: encoder / bottleneck / decoder model, parameter counting
//!   and checkpoints.
//! - [`pipeline`]: volume I/O, preprocessing, patch grids and vote
//!   reconstruction.
//! - [`training`]: losses, schedule, AdamW and the accumulation loop.
//! - [`metrics`]: DSC, VS, ASSD and the Wilcoxon signed-rank test.

pub mod blocks;
pub mod error;
mod init;
pub mod nn;
pub mod metrics;
pub mod network;
pub mod paths;
pub mod pipeline;
pub mod s6;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use network::{BottleneckKind, Model, ModelConfig};
pub use paths::TraversalPath;
pub use pipeline::{ClassTable, LabelMap, Volume};
pub use tensor::{Scalar, Tensor};
