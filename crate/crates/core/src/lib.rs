//! Cascade context encoder toolkit.
//!
//! * [`masking`] builds the binary region masks that drop image content.
//! * [`metric`] measures how stable an encoder's latent representation is
//!   under different masks (normalized squared distortion).
//! * [`nn`] is a small from-scratch network kernel: convolutions,
//!   transposed convolutions, the channel-wise fully-connected bottleneck,
//!   losses, Adam and a finite-difference gradient checker.
//! * [`cascade`] chains a half-resolution context encoder in front of a
//!   full-resolution one and trains the second stage with the first frozen.
//! * [`imaging`] handles PNG I/O and the synthetic dataset.

#![allow(clippy::needless_range_loop)]

pub mod cascade;
pub mod error;
pub mod imaging;
pub mod masking;
pub mod metric;
pub mod nn;
pub mod numeric;
pub mod resample;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Image, Shape, Tensor};
