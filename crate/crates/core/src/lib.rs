//! Detection and localisation of inpainting forgeries from fused semantic and
//! geometry patch features.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! - [`maskgen`] and [`datagen`] build tampered sample groups from clean
//!   images, either through external model clients or the bundled
//!   pseudo-inpainters.
//! - [`encoders`] turn an image into frozen patch-feature sequences.
//! - [`fusion`], [`contrastive`] and [`heads`] are the trainable parts: the
//!   cross-attention fusion block, the projection head with its three-class
//!   patch contrastive loss, and the localisation head.
//! - [`training`] optimises those parts; [`evaluation`] scores checkpoints.

pub mod contrastive;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod heads;
pub mod imageops;
pub mod mask;
pub mod maskgen;
pub mod nn;
pub mod patchgrid;
pub mod training;

pub use error::{Error, Result};
pub use mask::Mask;
pub use patchgrid::{PatchClass, PatchGrid, PatchLabels};
