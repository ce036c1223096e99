//! Full-attention neural architecture search.
//!
//! A stage-wise supernet of self-attention blocks is searched by
//! differentiable bilevel optimization, first under a masked-image
//! reconstruction task ("context auto-regression") and then under
//! classification, discretized into a standalone network, and retrained.
//!
//! The crate is self-contained: [`autodiff`] is a small reverse-mode engine
//! over [`Tensor`]s and everything above it is built from its primitives.

pub mod attention;
pub mod autodiff;
pub mod car;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod optim;
pub mod params;
pub mod persist;
pub mod plot;
pub mod scale;
pub mod search;
pub mod space;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
