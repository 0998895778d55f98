//! Explainable control-flow-graph classification.

pub mod autoencoder;
pub mod encode;
pub mod eval;
pub mod error;
pub mod explain;
pub mod extract;
pub mod fuse;
pub mod gcn;
pub mod graph;
pub mod numerics;
pub mod synth;

pub use error::{Error, Result};
