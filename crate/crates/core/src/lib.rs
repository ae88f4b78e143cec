pub mod error;
pub mod image;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod patchwork;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
