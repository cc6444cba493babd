//! Transformer-to-transformer knowledge distillation for semantic segmentation.
//!
//! A student hierarchical transformer learns from a frozen, wider teacher through
//! two branches: patch-embedding alignment on every stage's token sequence, and
//! a deepest-to-shallowest review of the student's feature maps through
//! selective-kernel fusion modules scored with a hierarchical context loss.

pub mod data;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod ops;
pub mod params;
pub mod tensors;
pub mod train;

pub use error::{Error, Result};
