//! Dynamic spatial-temporal graph convolutional decoding: a translation model
//! that emits target tokens together with a growing syntactic graph.
//!
//! This crate is `no_std` (with `alloc`) unless the `std` feature is enabled.
#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rw_kernel;
pub mod spatial;
pub mod temporal;
pub mod tensor;
pub mod training;

pub use autodiff::{Axis, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::Model;
pub use tensor::Tensor;
