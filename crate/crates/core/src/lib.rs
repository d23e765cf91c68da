//! Stochastic and fluid diffusion models of Bass and SIR type.
//!
//! The crate simulates the jump process exactly, integrates the deterministic
//! limit, evaluates Fisher information for the population size `N`, runs the
//! closed-form and likelihood estimators and drives seeded Monte-Carlo studies.

pub mod discrete;
pub mod error;
pub mod estimate;
pub mod experiments;
pub mod fisher;
pub mod fluid;
pub mod likelihood;
pub mod model;
pub mod optimize;
pub mod parallel;
pub mod rng;
pub mod simulate;
pub mod stats;

pub use error::{Error, Result};
pub use model::{
    reconstruct_state, validate_params, DiffusionState, JumpKind, JumpLedger, LedgerEntry, ModelParams,
    Observation, ObservationSet, Reconstruction, Regime,
};
pub use rng::RngStream;
