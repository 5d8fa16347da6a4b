//! Semi-supervised sound event detection with shift-consistency mean-teacher
//! training, adversarial domain adaptation and embedding diagnostics.

pub mod ada;
pub mod augment;
pub mod autograd;
pub mod data;
pub mod datagen;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod train;

pub use error::{Error, Result};

/// Number of event classes.
pub const N_CLASSES: usize = 10;
