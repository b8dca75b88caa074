//! Point-to-voxel transformer detection pipeline on dense pillar grids.
//!
//! The crate is organized around the data flow of a pillar-based 3D
//! detector: raw points are bucketed into bird's-eye-view pillars
//! ([`voxel`]), each pillar's point set is reduced to one feature vector
//! by either a pooling PointNet or an attention aggregator ([`encoder`]),
//! the per-pillar features are scattered onto a dense BEV grid and pushed
//! through windowed-attention blocks and center-style detection heads
//! ([`backbone`]). Everything differentiable runs on the reverse-mode
//! tape in [`tensor`]. [`scenes`] provides procedural ground truth and
//! the toy AP metric, [`arch`] the scaling-space configs and the FLOP
//! counter, and [`latency`] the static-vs-gather voxelization benchmark
//! kernels.

pub mod arch;
pub mod backbone;
pub mod encoder;
pub mod error;
pub mod latency;
pub mod model;
pub mod rng;
pub mod scenes;
pub mod tensor;
pub mod voxel;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
