//! From-scratch graph neural network classifier for sparse multi-channel
//! imagery (SAR-style chips), with grid-graph construction, input-vertex
//! pruning, lasso-driven weight pruning, and exact FLOP/parameter
//! accounting.

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod graph;
pub mod layers;
pub mod matrix;
pub mod model;
pub mod pruning;
pub mod sparse;
pub mod train;

pub use error::{Error, Result};
