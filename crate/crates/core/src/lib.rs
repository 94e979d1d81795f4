//! Spatiotemporal graph attention for origin-destination demand forecasting.
//!
//! The crate is `no_std` (with `alloc`) and holds the numerics: a small
//! reverse-mode autodiff engine, snapshot graphs, the spatial, temporal and
//! transferring attention layers, training, metrics and a synthetic data
//! generator. File formats and the command line live in the `gallat` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod ddw;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod model;
pub mod optim;
pub mod spatial;
pub mod synth;
pub mod temporal;
pub mod tensor;
pub mod training;
pub mod transfer;

pub use error::{GallatError, Result};
pub use tensor::Matrix;
