//! Composition of isolated sign clips into continuous sentence motion, plus
//! the evaluation and corpus tooling around it.

pub mod braid;
pub mod dataset;
pub mod duration;
pub mod error;
pub mod frame_select;
pub mod glossnorm;
pub mod metrics;
pub mod motion;
pub mod objectives;
pub mod pipeline;
pub mod retrieval;
pub mod stitch;
pub mod synth;
pub mod text;

pub use error::{CoreError, Result};
