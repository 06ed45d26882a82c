//! Dense bundle adjustment over keyframe poses, disparity maps and intrinsics,
//! driven by precomputed optical flow, depth priors and dense embedding maps.
//!
//! Flow residuals are robustified with Barron's general loss whose shape is
//! chosen per pixel from cross-view embedding similarity, so pixels on moved
//! or moving objects lose influence without an explicit motion segmentation.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod eval;
pub mod features;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod residuals;
pub mod robust;
pub mod synth;

pub use eval::{AlignMode, LabelSet, SegMetrics, SemanticPointCloud};
pub use features::{FeatureMap, PcaModel, PyramidConfig};
pub use geometry::{DisparityMap, Intrinsics, Pose, Twist};
pub use graph::{EdgePolicy, Keyframe, KeyframeGraph, SolveReport, SolverConfig, StopReason};
pub use io::{Dtype, FormatError};
pub use residuals::{EmbeddingMode, EmbeddingResidualConfig, FlowObservation, RegConfig};
pub use robust::{KernelChoice, KernelConfig};
pub use synth::{SceneBundle, SceneConfig, TrajectoryKind};
