//! Satellite-to-map translation with a conditional GAN.
//!
//! Everything runs on the crate's own reverse-mode autodiff core in
//! [`tensor`]; [`nn`] and [`gan`] build the U-Net generator and the patch
//! discriminator on top of it, [`data`] reads paired images and [`train`]
//! drives the alternating optimization.

pub mod data;
pub mod error;
pub mod gan;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Graph, Mode, Tensor, Var};
