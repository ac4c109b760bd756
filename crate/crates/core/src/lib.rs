//! LoRA width-scaling laboratory.
//!
//! * [`gamma`]: exact exponent calculus predicting stable learning rates and
//!   feature-learning regimes under both LoRA initializations.
//! * [`model`], [`optim`]: the teacher-student network with hand-written
//!   gradients for the LoRA factors and the optimizers that train them.
//! * [`runner`]: single trials and (width × lr × scheme × seed) sweeps.
//! * [`analysis`]: log-log slope fits and theory-vs-experiment verdicts.
//! * [`config`], [`records`], [`svg`]: experiment files, persisted results
//!   and chart rendering used by the command-line tool.

pub mod analysis;
pub mod config;
pub mod error;
pub mod gamma;
pub mod model;
pub mod optim;
pub mod records;
pub mod runner;
pub mod seed;
pub mod svg;

pub use error::{Error, Result};
pub use gamma::{Exponent, InitScheme};
