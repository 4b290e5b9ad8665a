//! Desk-scale confocal non-line-of-sight (NLOS) transient imaging.
//!
//! The crate couples a physical light-transport operator (forward histogram
//! synthesis and its exact adjoint) with a dual-branch graph-network
//! reconstruction pipeline: dynamic k-NN graph construction over feature
//! patches, negative-vertex selection, four aggregation variants, a
//! multi-order dilated update with gating, channel fusion, and a two-stage
//! decoupled albedo/depth training loop. Everything learnable runs on the
//! in-crate reverse-mode differentiation tape.

pub mod check;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod graph;
pub mod network;
pub mod physics;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{DiffTensor, Tape, Tensor};
