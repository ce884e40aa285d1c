//! Learned weighted Rips filtrations for point clouds.
//!
//! The pipeline assigns a weight to every point with an isometry-invariant
//! network that only looks at the distance matrix, builds the weighted Rips
//! filtration, computes persistence with the simplex pairing, vectorizes the
//! degree-1 diagram with Gaussian kernels at learnable centers, and routes the
//! classification loss gradient back through the pairing into the network.
//!
//! Module map:
//!
//! * [`geometry`] - point clouds, distance matrices, synthetic data.
//! * [`filtration`] - DTM weights and weighted Rips filtrations.
//! * [`persistence`] - boundary-matrix reduction and bottleneck distance.
//! * [`autodiff`] - a small matrix-valued reverse-mode tape, MLPs, Adam.
//! * [`weightnet`] - the weight network and its DistMatrixNet head.
//! * [`perslay`] - Gaussian PersLay vectorization.
//! * [`training`] - differentiable diagrams, losses, two-phase training.
//! * [`io`] - file formats, configs, manifests.

// Index loops mirror the math in the numeric kernels.
#![allow(clippy::needless_range_loop, clippy::too_many_arguments, clippy::large_enum_variant)]

pub mod autodiff;
pub mod error;
pub mod filtration;
pub mod geometry;
pub mod io;
pub mod perslay;
pub mod persistence;
pub mod rng;
pub mod training;
pub mod weightnet;

pub use error::{Error, Result};
