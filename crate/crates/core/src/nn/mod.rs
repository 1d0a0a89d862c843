//! Small CPU neural-network engine and the density-enhancement U-Net.

mod graph;
mod kernels;
pub mod loss;
pub mod optim;
pub mod store;
pub mod unet;

pub use graph::{Gradients, Graph, Var};
pub use loss::{smooth_l1, smooth_l1_grad};
pub use optim::{clip_global_norm, cosine_lr, train_step, AdamW, StepReport, TrainBatch};
pub use store::{load_weights, load_weights_for, save_weights, WEIGHTS_BLOB, WEIGHTS_MANIFEST};
pub use unet::{ForwardMode, ModelConfig, ModelWeights, Unet};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("cross-attention enabled but no embedding was supplied")]
    MissingEmbedding,
    #[error("non-finite loss {0} at step {1}")]
    NonFiniteLoss(f32, u64),
    #[error("weights manifest not found: {0}")]
    ManifestNotFound(String),
    #[error("parameter mismatch for '{name}': {msg}")]
    ParamMismatch { name: String, msg: String },
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data does not match shape {shape:?}"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn fill(shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}
