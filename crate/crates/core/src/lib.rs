//! Cluster-free 3D point-cloud instance segmentation.
//!
//! Instances are represented as candidate points chosen by an instance-aware
//! farthest-point sampler, encoded by stacked point-aggregation blocks, and
//! decoded into masks by a per-candidate dynamic convolution that also looks
//! at predicted axis-aligned boxes.
//!
//! Module map:
//!
//! * [`geom`]: scenes, boxes, masks, voxel maps.
//! * [`sampling`]: farthest-point sampling and its instance-aware variant.
//! * [`aggregator`]: ball query, point aggregation blocks, candidate heads.
//! * [`dynconv`]: kernel layouts and the box-aware mask decoder.
//! * [`supervision`]: matching, losses with analytic gradients, gradient checks.
//! * [`pipeline`]: encoder, inference, NMS, superpoint alignment, training.
//! * [`eval`]: AP / Box AP and coverage metrics.
//! * [`scenegen`]: synthetic scenes and the on-disk formats.

pub mod aggregator;
pub mod dynconv;
mod error;
pub mod eval;
pub mod geom;
pub mod nn;
pub mod pipeline;
pub mod sampling;
pub mod scenegen;
pub mod supervision;

pub use error::{Error, Result};
pub use geom::{Aabb, Point3, Scene, SoftMask, VoxelMap};
