//! Hierarchical recurrent adapters on a frozen toy backbone.
//!
//! Everything here is pure computation over `alloc`; file formats, the CLI
//! and wall-clock timing live in the `hra-lab` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adapter;
pub mod backbone;
pub mod baselines;
pub mod ctc;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod hra;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use rng::SplitMix64;
pub use tensor::{Elementwise, Tensor};
