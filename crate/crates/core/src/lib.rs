//! Softmax-free, sequence-normalized linear attention in a configurable
//! Vision Transformer, with the training, verification and scaling
//! machinery around it.
//!
//! The numeric core is generic over the scalar type: training and
//! benchmarks run at `f32`, verification suites run the same code at
//! `f64`. Concrete aliases for both live at the crate root.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod params;
pub mod probe;
pub mod rng;
pub mod scalar;
pub mod shape;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vit;

pub use attention::{AttentionConfig, Mechanism};
pub use error::{Error, Result};
pub use kernels::{parallel_enabled, set_parallel};
pub use scalar::Element;
pub use tensor::{Graph, Tensor};
pub use vit::{ViTConfig, ViTModel};

/// Training/benchmark precision.
pub type Graph32 = Graph<f32>;
pub type Tensor32 = Tensor<f32>;
pub type Model32 = ViTModel<f32>;

/// Verification precision.
pub type Graph64 = Graph<f64>;
pub type Tensor64 = Tensor<f64>;
pub type Model64 = ViTModel<f64>;
