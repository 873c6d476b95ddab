//! Desk-scale segmentation stack: a compact SAM-style encoder/decoder,
//! parameter-efficient adapters (prompt tokens, LoRA, full decoder tuning),
//! a deterministic training engine, a synthetic few-shot data generator,
//! and evaluation/reporting utilities.
//!
//! Everything runs on CPU in f32 with explicit seeding; identical seeds give
//! bit-identical results. The autodiff substrate lives in [`tensor`], the
//! architecture in [`model`], adapters in [`adapter`], the training loop in
//! [`train`], synthetic data in [`data`], and metrics/reports in [`eval`].

pub mod adapter;
pub mod ckpt;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
