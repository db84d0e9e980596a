//! Desk-scale split-inference pipeline with privacy instrumentation.
//!
//! A classifier is divided at an intermediate layer: the client runs the
//! front layers (optionally Siamese fine-tuned), projects the feature onto
//! PCA axes, adds Gaussian noise, and ships only the reduced noisy vector; the
//! server reconstructs and finishes classification. Two instruments quantify
//! what the transmitted feature leaks about an unauthorized fine-grained
//! task: a transfer-learning attack and a model-independent likelihood-rank
//! privacy measure.
//!
//! The numeric kernels are generic over [`scalar::Real`] (`f32`/`f64`); the
//! crate root exports `f64` aliases which the artifact formats, service and
//! experiment layers use.

pub mod error;
pub mod scalar;
pub mod tensor;

pub mod container;
pub mod data;
pub mod embedding;
pub mod experiments;
pub mod nn;
pub mod pca;
pub mod privacy;
pub mod service;
pub mod siamese;

pub use data::Dataset;
pub use embedding::{ClientBundle, ServerBundle, SplitModel};
pub use error::{Error, FrameError, Result};
pub use pca::PcaTransform;

/// Dense row-major `f64` tensor.
pub type Tensor = tensor::TensorBase<f64>;
/// `f64` network layer.
pub type Layer = nn::LayerBase<f64>;
/// `f64` layer stack.
pub type Network = nn::NetworkBase<f64>;
/// `f64` parameter gradients.
pub type Gradients = nn::GradientsBase<f64>;
