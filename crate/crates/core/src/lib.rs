//! Real-time reaching-motion prediction.
//!
//! The motion intention thread labels each 100 Hz frame REST or MOTION with a
//! two-state HMM over the band-passed gyro magnitude. While a reach is under way
//! the direction thread projects frames through a fitted reducer, scores them
//! with per-class Gaussian mixtures and accumulates the class posteriors until a
//! ratio or sum criterion fires. A five-state controller turns both threads into
//! robot commands.

pub mod accumulate;
pub mod dsp;
pub mod engine;
pub mod error;
pub mod frame;
pub mod fsm;
pub mod intention;
pub mod linalg;
pub mod mixture;
pub mod pipeline;
pub mod reduce;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
