//! Continual-learning car-following controller.
//!
//! A small LSTM commands the acceleration of a simulated follower in
//! closed loop. It is trained task by task over speed regimes, optionally
//! regularized with elastic weight consolidation (diagonal Fisher) or
//! memory-aware synapses, and evaluated as a stage matrix of spacing/speed
//! MSE and collision rate.

pub mod cli;
pub mod clreg;
pub mod data;
pub mod dfw;
pub mod error;
pub mod eval;
pub mod nn;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
