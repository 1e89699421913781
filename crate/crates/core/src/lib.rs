//! Convolutional fusion networks on a small dense-tensor engine.
//!
//! Side branches (1×1 convolution, ReLU, global average pooling) hang off the
//! pooling layers of a plain CNN; their GAP features are stacked with the main
//! branch and fused (sum, shared 1×1×S convolution, or locally connected)
//! before a single classifier.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod network;
pub mod run;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use checkpoint::{AnyTensor, Checkpoint};
pub use config::RunConfig;
pub use data::{Dataset, Split};
pub use error::{Error, Result};
pub use fusion::{FusionKind, FusionParams};
pub use model::{GraphSpec, ModelConfig, ModelParams, ParamBreakdown};
pub use network::{BackwardOptions, Gradients, LayerTape};
pub use tensor::{DType, Fill, Real, Tensor};
pub use train::{EvalResult, TrainConfig};
pub use transfer::{Distance, FeatureMatrix, RetrievalResult};
