//! Analytical performance model for distributed ML training and inference.
//!
//! Layers are costed with first-order compute, lookup and collective
//! formulas, pieced into per-device compute and communication streams, and
//! simulated with a two-stream scheduler to get iteration time, throughput
//! and exposed communication. The explorer searches hierarchical
//! (intra-node, inter-node) parallelization plans on top of that.

pub mod cost;
pub mod error;
pub mod explore;
pub mod io;
pub mod model;
pub mod plan;
pub mod sim;
pub mod trace;

pub use error::{Error, Result};
