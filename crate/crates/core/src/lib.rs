//! Post-hoc uncertainty head for frozen segmentation backbones.

pub mod error;
pub mod fusion;
pub mod head;
pub mod io;
pub mod losses;
pub mod maps;
pub mod metrics;
pub mod pipeline;
pub mod probe;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
