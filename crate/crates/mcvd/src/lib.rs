//! Masked conditional video diffusion at desk scale.
//!
//! A single eps-prediction denoiser is trained with independent blockwise
//! masking of past and future conditioning frames, which makes one model
//! capable of future prediction, past prediction, unconditional generation
//! and interpolation. Sampling runs DDPM or DDIM over a timestep subsequence
//! and extends videos blockwise autoregressively.

pub mod config;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod masking;
pub mod metrics;
pub mod nn;
pub mod real;
pub mod sampler;
pub mod schedule;
pub mod selftest;
pub mod trainer;

pub use error::{McvdError, Result};
pub use real::Real;
