pub mod ablate;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kan;
pub mod layers;
pub mod loss;
pub mod man;
pub mod network;
pub mod pagf;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{BnStats, Gradients, Graph, Tensor, Var};
