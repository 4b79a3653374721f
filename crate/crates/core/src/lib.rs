pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod detection;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod flops;
pub mod model;
pub mod params;
pub mod plot;
pub mod primitives;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use params::{Init, ParamStore};
pub use tensor::Tensor;
