//! Hybrid vision-transformer artifact detector.
//!
//! A self-contained training and evaluation stack: a small autodiff engine,
//! transformer and CNN layers, a token-fusion classifier with class and
//! distillation heads, a procedural artifact dataset, teacher/student
//! training with soft-label distillation, and binary-classification metrics.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
