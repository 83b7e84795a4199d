//! Basic-level-first curriculum training for convolutional classifiers.
//!
//! The crate covers the full pipeline: category taxonomy processing and label
//! allocation ([`taxonomy`]), dataset manifests and synthetic data
//! ([`dataprep`]), a small CPU tensor engine ([`nnkernel`]), model assembly and
//! checkpoints ([`model`]), two-phase training regimes ([`curriculum`]) and
//! frozen-feature transfer evaluation ([`transfer`]).

pub mod curriculum;
pub mod dataprep;
pub mod error;
pub mod model;
pub mod nnkernel;
pub mod rng;
pub mod taxonomy;
pub mod transfer;

pub use error::{Error, Result};
