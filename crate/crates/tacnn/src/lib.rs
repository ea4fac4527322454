//! A compact CPU engine for skeleton-based action recognition.
//!
//! The crate provides a from-scratch rank-4 tensor type with reverse-mode
//! autodiff, the convolutional building blocks of a topology-aware
//! skeleton classifier (coordinate- and virtual-part-aware grouping with
//! channel attention), a constructive check that graph convolution is a
//! pointwise convolution over a joints-as-channels layout, skeleton
//! mixing augmentation, dataset formats, a training loop, and a static
//! parameter/FLOPs profiler.

pub mod augment;
pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod gconv;
pub mod layers;
pub mod model;
pub mod profiler;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use model::{ModelConfig, TaCnn};
pub use tape::{finite_diff_check, Ctx, Gradients, Mode, Tape, Var};
pub use tensor::{BinaryKind, Element, Tensor4};
