pub mod autograd;
pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod imageio;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod phantom;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Bundle32 = nets::ModelBundle<f32>;
pub type Bundle64 = nets::ModelBundle<f64>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
