pub mod aqm;
pub mod container;
pub mod detection;
pub mod error;
pub mod eval;
pub mod formats;
pub mod fusion;
pub mod gradcheck;
pub mod kernels;
pub mod linalg;
pub mod modelspec;
pub mod nms;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
