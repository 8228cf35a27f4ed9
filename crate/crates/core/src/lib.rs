//! Evidential surrogate models for ensemble simulations.
//!
//! A fully connected network maps simulation parameters to a field of
//! Normal-Inverse-Gamma hyperparameters. The Student-t marginal gives raw
//! prediction intervals, which split conformal calibration turns into
//! intervals with finite-sample coverage guarantees.
//!
//! The commonly shared types are re-exported at the crate root.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conformal;
pub mod container;
pub mod data;
pub mod error;
pub mod evidential;
pub mod grid;
pub mod metrics;
pub mod network;
pub mod numeric;
pub mod predict;
pub mod special;
pub mod training;

pub use error::{Error, Result};

pub use conformal::{CalibrationOptions, CalibrationTable, CoverageReport, MiscoverageLevel, Quantile, TailAllocation};
pub use data::{EnsembleDataset, EnsembleMember, NoiseModel, ParamRange, SimulatorSpec, SparseRegion, Split};
pub use evidential::{EvidentialField, EvidentialParams, LossWeights, RawInterval};
pub use network::{EvidentialNet, NetConfig};
pub use predict::{FieldPrediction, IntervalField};
pub use training::{Checkpoint, NormalizationTransform, TrainConfig};
