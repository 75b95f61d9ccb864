//! Minimal reverse-mode differentiation engine and optimizer.
//!
//! The engine records tensor-level operations on a [`Tape`]; a backward
//! pass accumulates gradients for every node and scatters them into a
//! persistent [`ParamSet`]. Everything is 64-bit: the models here are tiny,
//! so speed is a non-issue and strict finite-difference gradient checks
//! become possible.

mod adam;
mod checkpoint;
mod gradcheck;
pub mod linalg;
mod params;
mod tape;

pub use adam::{adam_step, AdamHyper, AdamOutcome, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, ParamRecord};
pub use gradcheck::{gradient_check, sample_coords, CoordCheck, GradCheckReport, DEFAULT_STEP};
pub use params::{Param, ParamId, ParamSet};
pub use tape::{
    batch_mean, cross_entropy, lstm_cell, softmax_temperature, LstmGates, Tape, TensorId,
    PROB_FLOOR,
};
