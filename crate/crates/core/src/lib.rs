pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod diff;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod mdd;
pub mod model;
pub mod params;
pub mod rstr;
pub mod supervision;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor4;
