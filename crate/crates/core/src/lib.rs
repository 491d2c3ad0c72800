//! Stage-wise slimmable supernets: training with stage-wise inplace
//! distillation, FLOPs/latency cost models, and a two-level evolutionary
//! search for channel-pruned subnets.
//!
//! The crate is `no_std` + `alloc`. The default `std` feature enables
//! parallel stage evaluation through rayon.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod analysis;
pub mod cost;
pub mod data;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod real;
pub mod rng;
pub mod search;
pub mod slimnet;
pub mod tape;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
