pub mod autograd;
pub mod checkpoint;
pub mod compressor;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod icl;
pub mod model;
pub mod optim;
pub mod rerank;
pub mod retrieval;
pub mod scalar;
pub mod store;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Model32 = model::ModelState<f32>;
pub type Model64 = model::ModelState<f64>;
pub type SoftPrompt32 = model::SoftPrompt<f32>;
pub type SoftPrompt64 = model::SoftPrompt<f64>;
