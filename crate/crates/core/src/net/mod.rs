//! A small CPU tensor engine and the single-feature-map detector built on it.

mod checkpoint;
pub mod layers;
mod model;
mod tensor;

use thiserror::Error;

pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint};
pub use model::{
    forward_detector, images_to_tensor, init_weights, ConvLayer, DetectorModel, Gradients, HeadOutputs,
    ModelConfig, Trace, PRNG_NAME, STAGES,
};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: bad magic, expected `SOSC`")]
    BadMagic,
    #[error("checkpoint: unsupported version {0}")]
    Version(u32),
    #[error("checkpoint: invalid header: {0}")]
    Header(String),
    #[error("checkpoint: expected tensor `{expected}`, found `{found}`")]
    MissingTensor { expected: String, found: String },
    #[error("checkpoint: tensor `{name}` has dims {found:?}, config requires {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint: truncated")]
    Truncated,
    #[error("checkpoint: {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}
