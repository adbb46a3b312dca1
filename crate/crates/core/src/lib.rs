//! Attribute steering in the latent space of a small image generator.
//!
//! A direction `θ` is learned so that `G(z + αθ, y)` moves a differentiable
//! scorer `S` by `α`. Everything here is `no_std` + `alloc` and runs on a
//! small tape-based reverse-mode autodiff engine.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod autodiff;
pub mod diagnostics;
pub mod evaluation;
pub mod image;
pub mod models;
pub mod shapeworld;
pub mod steering;
pub mod tensor;

pub use image::GrayImage;
pub use tensor::{ContentDigest, Tensor};
