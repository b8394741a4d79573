//! Training and evaluation toolkit for similarity-constraint GANs.
//!
//! The crate covers latent sampling ([`latent`]), a differentiable SSIM
//! ([`ssim`]), the original and modified similarity constraints
//! ([`constraint`]), generator/discriminator networks and their objectives
//! ([`models`]), the evaluation metrics ([`metrics`]) and the experiment
//! engine ([`train`]).

pub mod constraint;
pub mod data;
pub mod error;
pub mod latent;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod ssim;
pub mod train;

pub use error::{Error, Result};
