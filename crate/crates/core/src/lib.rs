//! Allocation-only numerical core for boundary-aware test-time adaptation.
//!
//! Everything here is pure and runs without `std`: prompt geometry, Gaussian
//! prompt heatmaps, Sobel boundary maps, the masked Pearson alignment loss
//! (with its analytic gradient), the boundary-map quality gate and the
//! overlap metrics used for evaluation. Model code lives in the `batta`
//! crate and calls into these routines.
#![no_std]

extern crate alloc;

pub mod align;
pub mod boundary;
mod error;
pub mod feature;
pub mod gate;
pub mod heatmap;
pub mod mask;
pub mod metrics;
pub mod prompt;

pub use align::{alignment_loss, masked_pearson, Alignment, AlignmentReport, Correlations};
pub use boundary::{boundary_map, mask_features, sobel_gradients, ChannelReduce};
pub use error::{Error, Result};
pub use feature::{BoundaryMap, FeatureMap};
pub use gate::{quality_gate, GateDecision, GateThresholds, GridRegion};
pub use heatmap::{
    aggregate_heatmap, broadcast_inject, coord_grid, gaussian_at, prompts_to_centers,
    GaussianCenter, Grid, Heatmap, SigmaPolicy,
};
pub use mask::{minimal_box, sample_point, BinaryMask};
pub use metrics::{dice, iou_foreground, miou};
pub use prompt::{BoxXYXY, Point2D, PromptSet};
