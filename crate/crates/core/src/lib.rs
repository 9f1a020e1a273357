pub mod autodiff;
pub mod backbone;
pub mod cah;
pub mod container;
pub mod dpp;
pub mod error;
pub mod gradcheck;
pub mod imageio;
pub mod kernels;
pub mod model;
pub mod retrieval;
pub mod synthdata;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{FrptError, Result};
pub use tensor::{Real, Tensor};
