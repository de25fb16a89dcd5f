//! Volumetric semantic scene completion from a single depth image.
//!
//! A single encoder compresses the truncated signed distance volume of a
//! depth image into a shared latent block; three generators decode it into
//! the reconstructed SDF, a two-channel geometric completion and an
//! `N+1`-channel semantic completion, with patch discriminators on the SDF
//! and semantic outputs. Everything runs on a small in-crate tensor engine
//! with reverse-mode differentiation.

pub mod autograd;
pub mod cli;
pub mod error;
pub mod kernels;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Element, Fill, Tensor};
pub mod nn;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod scene;
pub mod trainer;
pub mod voxel;
