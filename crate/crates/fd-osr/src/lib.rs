//! Two-stage representation learning for open set recognition: a
//! self-supervised feature-decoupling pre-training stage, supervised
//! fine-tuning (or unsupervised clustering), and a centroid-based
//! open-set decision rule with representation-quality metrics.

extern crate blas_src;

pub mod data;
pub mod error;
pub mod experiment;
pub mod finetune;
pub mod metrics;
pub mod network;
pub mod osr;
pub mod pretrain;
pub mod transforms;

pub use error::{Error, Result};
