//! Remaining-useful-life estimation for fleets of run-to-failure machines.
//!
//! The crate couples a tape-based autodiff engine with a gated graph neural
//! network: per-node sensor encoders feed a message-passing core over an
//! equipment graph, and an attention readout produces one life estimate per
//! sliding window of sensor history. Supporting modules cover turbofan data
//! preparation, training, evaluation, and two recurrent baselines.

pub mod autodiff;
mod binfmt;
pub mod channels;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod model;
pub mod seeds;
pub mod train;

pub use error::{Error, Result};
