//! Sparse radar object detection in the bird's-eye view.
//!
//! The crate is organised bottom-up:
//!
//! * [`points`]: radar reflections, radius neighbour search, synthetic scenes.
//! * [`grid`]: the sparse 2D grid, padding, pooling and unpooling.
//! * [`nn`]: differentiable primitives (linear, batch norm, ReLU), SGD,
//!   finite-difference gradient checking and checkpoints.
//! * [`kpconv`]: kernel point convolution over point neighbourhoods.
//! * [`sparse_conv`]: rulebook-driven submanifold, strided and transposed
//!   sparse convolutions, plus a dense reference implementation.
//! * [`render`]: sparse pillar, sparse kernel-point and multigrid renderers.
//! * [`backbone`]: dual point/voxel blocks, the baseline submanifold block,
//!   and the encoder / FPN decoder.
//! * [`detection`]: heads, box coding, rotated IoU, NMS, metrics and loss.
//! * [`model`]: the end-to-end detector and toy training loop.
//! * [`config`]: structured configuration and presets.

pub mod backbone;
pub mod config;
pub mod detection;
pub mod error;
pub mod grid;
pub mod kpconv;
pub mod model;
pub mod nn;
pub mod points;
pub mod profile;
pub mod render;
pub mod rng;
pub mod sparse_conv;

pub use config::{BlockKind, Config, RenderMode};
pub use detection::{ClassId, Detection, Obb};
pub use error::{Error, Result};
pub use grid::{CellIndex, DenseGrid, GridSpec, SparseGrid};
pub use model::Detector;
pub use nn::{Ctx, Module, Parameter};
pub use points::{PointCloud, RadarPoint};
pub use profile::{BenchReport, LayerStat};

#[cfg(test)]
pub(crate) mod test_support;
