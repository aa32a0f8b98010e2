//! Multi-scale edge-based U-shape network (MEUN) for salient object
//! detection, built on a self-contained reverse-mode autodiff engine.
//!
//! The crate is organized around the pipeline:
//!
//! - [`tensor`] — dense `(n, c, h, w)` tensors, the autodiff tape, and
//!   finite-difference gradient checking for every primitive.
//! - [`model`] — the network itself: encoder, channel squeeze, additional
//!   down-sampling module, edge branch, U-shape edge blocks, and heads.
//! - [`loss`] — salient-edge label generation and the combined edge / BCE /
//!   soft-IoU training objective.
//! - [`metrics`] — mean F-measure, MAE, S-measure, and E-measure.
//! - [`data`] — NetPBM codecs, dataset indexing, synthetic data, checkpoints.
//! - [`optim`] — SGD with momentum, decoupled weight decay, and two
//!   learning-rate groups.
//! - [`cli`] — the train / infer / eval / gradcheck / synth entry points.

pub mod cli;
pub mod data;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;

pub use params::{LrGroup, Param, ParamStore};
pub use tensor::{Scalar, Shape, Tensor, TensorError};
