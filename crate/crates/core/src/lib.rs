pub mod backbone;
pub mod bridge;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pdbs;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::Mcpa;
pub use tensor::{Scalar, Tape, Tensor, Var};
