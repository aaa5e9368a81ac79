//! Roof-type segmentation and dwelling flood-risk pipeline.
//!
//! The crate is organized by pipeline stage:
//!
//! - [`geodata`]: georeferenced PNG + world-file rasters, dwelling labels, rasterization, GeoJSON output
//! - [`tiler`]: fixed-size tiling, empty-tile filtering and seeded dataset splits
//! - [`tensor`]: dense tensors and the forward/backward kernels used by the network
//! - [`ternausnet`]: the VGG-encoder U-Net, weight files and encoder pretraining
//! - [`train`]: Adam, augmentation and the training loop
//! - [`metrics`]: confusion matrices, weighted accuracy / IoU, binary metrics
//! - [`vectorize`]: argmax maps, connected components, boundary tracing and simplification
//! - [`risk`]: hazard sampling, proximity features and 1-5 risk scores
//! - [`synth`]: procedural AOIs and texture patches so the pipeline runs without private imagery
//! - [`pipeline`] and [`cli`]: stage orchestration and the `roofrisk` command line

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod geodata;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod risk;
pub mod synth;
pub mod tensor;
pub mod ternausnet;
pub mod tiler;
pub mod train;
pub mod vectorize;

#[cfg(test)]
mod properties;
