//! Burst denoising with multi-size, per-pixel separable kernels predicted by
//! a small encoder-decoder network.
//!
//! The crate covers tensors and reverse-mode differentiation, the network,
//! kernel composition and application, synthetic burst generation, losses
//! and metrics, and training and evaluation drivers.

pub mod bench;
pub mod checkpoint;
pub mod container;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod graph;
pub mod imageio;
pub mod kernels;
pub mod loss;
pub mod model;
pub mod ops;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;

pub use container::Container;
pub use corpus::SourcePool;
pub use error::{Error, Result};
pub use eval::{denoise, evaluate, EvalReport, Mode};
pub use graph::{Graph, Var};
pub use kernels::{reconstruct_inference, reconstruct_training, KernelField, SeparableKernel};
pub use loss::LossSchedule;
pub use model::{init_weights, Checkpoint, ModelConfig};
pub use optim::{AdamConfig, AdamState};
pub use synth::{gain_preset, BurstSample, BurstSpec, Gain, NoiseParams};
pub use tensor::{DType, Real, Tensor};
pub use train::{BurstStream, SyntheticStream, TrainConfig, Trainer};
