//! Text-steered editing of voxel assets with rectified-flow models.
//!
//! The crate is organized by subsystem:
//!
//! - [`tensor`]: dense tensors and reverse-mode autodiff.
//! - [`voxel`]: the procedural asset universe (scenes, edits, renders).
//! - [`data`]: paired edit-data synthesis and the two-stage filter.
//! - [`flow`]: the base velocity model and its zero-initialized control branch.
//! - [`train`]: flow-matching, preference optimization and the optimizer.
//! - [`sample`]: Euler sampling with guidance and the editing pipeline.
//! - [`eval`]: geometry and appearance metrics, ICP and the benchmark runner.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod rng;
pub mod sample;
pub mod tensor;
pub mod train;
pub mod voxel;

pub use error::{Error, Result};
