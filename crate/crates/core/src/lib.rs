//! Core of a unified open-vocabulary segmentation and detection network:
//! tensors, a reverse-mode tape, the model, its losses, matching, metrics and
//! a synthetic data generator. No I/O lives here.

#![no_std]

extern crate alloc;

pub mod config;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod kernels;
pub mod losscheck;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod mmda;
pub mod model;
pub mod nn;
pub mod param;
pub mod real;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use param::{Bound, Param, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
