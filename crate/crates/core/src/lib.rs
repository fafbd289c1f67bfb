//! Learned multi-view local descriptors for 3D point clouds.
//!
//! The pipeline renders the neighborhood of a keypoint from a small set of
//! learnable virtual cameras, runs every view patch through a shared CNN,
//! fuses the per-view feature maps and embeds the result as a unit-length
//! descriptor. Rendering is hard (z-buffered) in the forward pass while the
//! gradients with respect to the camera parameters come from a soft,
//! probabilistic aggregation of the splatted points, so viewpoints train
//! jointly with the network.
//!
//! Module map:
//!
//! - [`tensor`]: a small reverse-mode tape with exactly the ops the network needs.
//! - [`geometry`]: point clouds, normals, local reference frames, spatial index.
//! - [`render`]: cameras, hard and soft sphere-splat rendering, patch augmentation.
//! - [`network`]: CNN backbone, view pooling and descriptor head.
//! - [`training`]: correspondence sampling, losses, Adam and the training loop.
//! - [`evaluation`]: mutual nearest-neighbour matching, recall, Kabsch and RANSAC.
//! - [`io`]: PLY, manifests, descriptor files and the synthetic scene generator.

pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod network;
pub mod par;
pub mod render;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{LocalFrame, PointCloud, SpatialIndex};
pub use network::{FusionMode, Model, ModelConfig};
pub use render::{Camera, SoftRenderConfig, ViewPatch, ViewpointSet};
pub use tensor::{Tape, Tensor, Var};
