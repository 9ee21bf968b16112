//! Scene-flow estimation with global motion propagation through selective
//! state-space models.
//!
//! The crate is `no_std` (it needs `alloc`) unless the `std` feature is on,
//! and contains every numerical piece of the network:
//!
//! * [`tensor`] and [`tape`]: dense `f64` tensors and a reverse-mode tape.
//! * [`ssm`]: zero-order-hold discretization, sequential / blocked scans,
//!   the materialized convolution kernel and selective projections.
//! * [`mamba`]: the gated bidirectional Mamba block and block stacks.
//! * [`fio`]: feature-induced point ordering.
//! * [`isu`]: the iterative update operators (ISU and its ablation variants).
//! * [`pointcloud`]: FPS, KNN, set aggregation, cost volumes, warping,
//!   upsampling and scene-flow metrics.
//! * [`pipeline`]: the coarse-to-fine network, loss, optimizer and the
//!   synthetic scene generator.
//!
//! File formats, the command line and timing live in the companion
//! `flowmamba` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;
#[cfg(all(test, not(feature = "std")))]
extern crate std;

pub mod error;
pub mod fio;
pub mod gradcheck;
pub mod isu;
pub mod mamba;
pub mod math;
pub mod nn;
pub mod pipeline;
pub mod pointcloud;
pub mod ssm;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
