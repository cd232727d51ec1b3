//! Shape-conditioned 3D molecule generation with equivariant diffusion.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod forward_process;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod predictor;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod shape_autoencoder;
pub mod training;
pub mod verify;
pub mod vn_layers;

pub use error::{Error, Result};
