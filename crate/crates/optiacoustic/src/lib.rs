//! Metric-scale opti-acoustic 3D reconstruction.
//!
//! Dense two-view optical pointmaps carry shape but an arbitrary scale;
//! a multibeam sonar carries metric range but no elevation. This crate fuses
//! the two: sonar scans build an occupancy voxel grid, acoustic depth images
//! rendered from the grid anchor the optical scale by robust regression, and
//! a keyframe graph with per-component optimization assembles the metric
//! reconstruction.
//!
//! Entry points:
//! - [`acoustic::OccupancyGrid`]: sonar evidence accumulation and acoustic
//!   depth rendering.
//! - [`scale::ransac_scale`] and [`scale::refine_scale`]: metric scale from
//!   optical/acoustic depth pairs, then from keyframe matches.
//! - [`pipeline::Pipeline`]: the full per-frame tracking loop.
//! - [`sim`]: synthetic scenes, sonar simulation, and trajectories for
//!   reproducing the benchmark datasets.

pub mod acoustic;
pub mod config;
pub mod dataset;
pub mod extproc;
pub mod geometry;
pub mod graph;
pub mod measure;
pub mod oracle;
pub mod pipeline;
pub mod ply;
pub mod pointmap;
pub mod raster;
pub mod scale;
pub mod sim;
