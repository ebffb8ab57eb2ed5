//! Learning and control of contextual MDPs whose hidden context switches
//! follow a Markov chain.
//!
//! The model places a sticky hierarchical Dirichlet process prior on the
//! context transition matrix, learns the switching dynamics by variational
//! inference with exact forward-backward messages, removes spurious contexts
//! through a stochastic-complement reduction of the chain, filters context
//! beliefs online and plans with belief-aware cross-entropy MPC.

pub mod belief;
pub mod chain;
pub mod control;
pub mod dynamics;
pub mod envs;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod par;
pub mod prior;

pub use error::{Error, Result};
