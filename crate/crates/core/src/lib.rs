pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod mpnn;
pub mod nets;
pub mod optim;
pub mod params;
pub mod spca;
pub mod tensor;
pub mod train;
pub mod transfer;
pub mod viz;

pub use error::{Error, ErrorCategory, Result};
pub use tensor::Tensor;
