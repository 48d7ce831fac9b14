//! Sequential, anchor-guided rib instance segmentation and anatomical
//! labeling for frontal chest X-ray images.
//!
//! The pipeline detects and segments ribs 1-9 on both sides with one network
//! per rib index. Anchor boxes are not a regular grid but Mean Shift modes of
//! the normalized ground-truth boxes, and each network past rib 1 receives the
//! segmentation of the rib above it as its third input channel, so inference
//! runs as a strict top-to-bottom cascade.

pub mod anchors;
pub mod dataio;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod pipeline;
