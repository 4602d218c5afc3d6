//! Dual-band diffusion nowcasting on synthetic radar echo sequences.
//!
//! The crate splits a forecast into an orthogonal pair of frequency bands:
//! a convolutional diffusion branch models the smooth in-band trend, and a
//! latent self-attention diffusion branch restores the out-of-band detail
//! the convolutional path cannot carry. A verification lab checks the
//! spectral-decay and capacity bounds that motivate the split, numerically.
//!
//! Start with the `examples/` directory; each example exercises one
//! capability end to end. The `duocast` binary wraps the same entry points
//! as subcommands.

pub mod error;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod grid;
pub mod highfreq;
pub mod lowfreq;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod render;
pub mod spectral;
pub mod synthdata;
pub mod theory;
pub mod real;

pub use error::{Error, Result};
pub use real::Real;
