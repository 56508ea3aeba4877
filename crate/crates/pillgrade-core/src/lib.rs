//! Point-cloud pilling grade classification.
//!
//! The pipeline: raw captures are downsampled and normalized, cut into
//! Morton-ordered point patches, embedded by a shared mini-PointNet, fused
//! with a global feature from a non-parametric trigonometric encoder, and
//! classified by a dual-masked autoregressive transformer trained with a
//! Chamfer-distance generation loss plus cross entropy.

pub mod autograd;
pub mod chamfer;
pub mod cloud;
pub mod data;
pub mod embed;
pub mod error;
pub mod geom;
pub mod gpt;
pub mod io;
pub mod npe;
pub mod optim;
pub mod patches;
pub mod synth;
pub mod train;

pub use chamfer::{chamfer, ChamferLoss};
pub use cloud::{normalize_unit_sphere, uniform_downsample, Point3, PointCloud};
pub use error::{Error, Result};
pub use geom::{fps, knn, morton_encode, DEFAULT_MORTON_BITS};
pub use patches::{build_patches, PatchSet};
