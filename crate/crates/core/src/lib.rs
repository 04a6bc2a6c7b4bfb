pub mod codebook;
pub mod dataset;
pub mod descriptor;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod format;
pub mod freak;
pub mod image;
pub mod report;
pub mod retrieval;
pub mod scale_space;
pub mod sift;
pub mod synth;

pub use error::{Error, Result};
