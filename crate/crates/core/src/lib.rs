//! A small, fully transparent convolutional network engine.
//!
//! The network shape is fixed (conv → leaky ReLU → 2×2 max-pool → conv →
//! leaky ReLU → dense → softmax) while every dimension is derived from a
//! single input-size constant. Training uses mini-batch gradient
//! accumulation and bias-corrected Adam, with explicit clipping policies
//! and compensated summation in the dense layer.
//!
//! Module map:
//!
//! * [`config`]: network/training/numeric configuration and derived dimensions
//! * [`numcore`]: Kahan summation, activations, clipping, softmax, loss
//! * [`forward`]: resize lookup tables, convolution, pooling, dense, inference
//! * [`backward`]: backpropagation into batch-accumulated gradient buffers
//! * [`optimizer`]: Adam with weight clipping
//! * [`weightstore`]: He init, binary and C-header persistence, tiered loading
//! * [`dataset`]: folder-per-class indexing, PPM decoding, synthetic data
//! * [`trainer`]: the epoch/batch loop and evaluation
//! * [`oracle`]: double-precision reference network and gradient checker
//! * [`exec`]: sequential / rayon execution switch

pub mod backward;
pub mod config;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod forward;
pub mod numcore;
pub mod optimizer;
pub mod oracle;
pub mod params;
pub mod trainer;
pub mod weightstore;

pub use config::{ClassMap, DerivedDims, NetConfig, NumericPolicy, Settings, TrainConfig};
pub use error::{ConfigError, DatasetError, Error, NumericFault, Result, WeightError};
pub use exec::Exec;
pub use params::ParamSet;
