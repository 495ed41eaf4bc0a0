//! Gradient-highway adapter tuning on a toy Swin-style backbone.
//!
//! The crate is organised bottom-up:
//!
//! - [`tape`]: a reverse-mode autodiff tape that records every primitive,
//!   prunes the backward pass to the trainable closure and accounts for the
//!   bytes each node keeps alive for the backward pass.
//! - [`backbone`]: a windowed-attention hierarchical backbone whose blocks
//!   expose their two sublayer outputs ("taps") to hooks.
//! - [`peft`]: parameter registry, tuning policies and every adapter family
//!   (serial adapters, LoRA, AdaptFormer and the E3VA highway).
//! - [`accountant`]: symbolic parameter counting straight from configs.
//! - [`train`]: synthetic dense-prediction data, the FPN-style head, AdamW
//!   and the seeded training loop.
//! - [`profile`]: per-method gradient-memory and timing measurements.
//! - [`report`]: CSV and JSON report files with overwrite protection.

pub mod accountant;
pub mod backbone;
pub mod error;
pub mod init;
pub mod peft;
pub mod profile;
pub mod real;
pub mod report;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
