//! Synthesis of three-dimensional cell and cell-cluster models from
//! constrained feature vectors.
//!
//! The crate is organised bottom-up:
//!
//! * [`features`] - constrained feature vectors and their packing;
//! * [`mesh`] - watertight cell meshes and cluster scenes;
//! * [`render`] - orthographic projections and cross-sections;
//! * [`nn`] - dense/conv/attention layers with manual backpropagation;
//! * [`gan`] - the single-cell Wasserstein adversarial loop;
//! * [`topo`] - the topology transformer for cluster synthesis;
//! * [`eval`] - Fréchet distance between embedded image sets;
//! * [`pipeline`] - ingestion, fixtures and experiment orchestration.

pub mod error;
pub mod eval;
pub mod features;
pub mod gan;
pub mod mesh;
pub mod nn;
pub mod pipeline;
pub mod render;
pub mod topo;

pub use error::{Error, Result};
