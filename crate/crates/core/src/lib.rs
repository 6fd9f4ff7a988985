//! Point cloud attribute compression by folding a 2D grid onto the cloud.
//!
//! A small network is overfit to the cloud's geometry so that it folds a
//! lattice onto the surface. After refinement, colors are mapped onto the
//! lattice cells and the resulting image goes through an ordinary image
//! codec. The decoder already has the geometry and rebuilds the fold itself,
//! so no network weights are transmitted.

pub mod bitstream;
pub mod cloud;
pub mod error;
pub mod fold;
pub mod image;
pub mod knn;
pub mod mapping;
pub mod pipeline;
pub mod ply;
pub mod refine;
pub mod selftest;
pub mod synth;

pub use cloud::{normalize, segment_blocks, NormalizeTransform, Patch, Point3, PointCloud, Rgb};
pub use error::{Error, Result};
pub use knn::{build_index, SpatialIndex};
pub use pipeline::{decode, encode, run_stage_ablation, PipelineConfig};
pub use ply::{load_ply, save_ply, PlyFormat};
