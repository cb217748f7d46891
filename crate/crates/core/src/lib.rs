//! SPD-manifold neural networks with a Log-Euclidean self-attention module.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. It covers the numerical core: symmetric eigendecomposition, the
//! Log-Euclidean toolkit, SPDNet layers with structured backward passes, the
//! attention module, the stacked-autoencoder network, Stiefel optimization
//! and covariance-descriptor data generation. File formats, configuration
//! and the command-line front end live in `smsa-cli`.
#![cfg_attr(not(feature = "std"), no_std)]
// `!(x >= 0.0)` style guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

mod math;

pub mod attention;
pub mod data;
pub mod eig;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod linalg;
pub mod manifold;
pub mod network;
pub mod optim;

pub use eig::{sym_eig, Eig};
pub use error::{Error, Result};
pub use linalg::Mat;
pub use manifold::{SpdMatrix, SymMatrix};
