//! Fully sparse LiDAR 3D object detection.
//!
//! Points are voxelized sparsely, encoded, voted toward object centers and
//! grouped by connected components. Each group is then recognized as one
//! instance with group-level pooling, producing one proposal per group. A
//! second recognition stage regroups points by proposal membership and
//! refines the boxes. Compute and memory follow the number of points, not
//! the size of the perception area.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data_synth;
pub mod dense;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod nn;
pub mod segment_ops;
pub mod sir;
pub mod sparse_encoder;
pub mod tensor;
pub mod training;
pub mod vote_group;

#[cfg(test)]
pub(crate) mod testutil;

pub use config::RunConfig;
pub use data_synth::{ObjectClass, Scene};
pub use error::{FsdError, Result};
pub use geometry::{Box3D, PointCloud};
pub use model::{Detection, FsdModel};
pub use segment_ops::{GroupIndex, Reduce};
pub use tensor::FeatureArray;
