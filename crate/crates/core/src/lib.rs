//! Two-stage video encoder pretraining at desk scale.
//!
//! The crate bundles a small autodiff substrate, a factorized spatiotemporal
//! transformer, contrastive (stage 1) and masked-distillation (stage 2)
//! training loops, a downstream adaptation/evaluation harness, and a
//! synthetic video-caption corpus generator, all driven by the `vidfm` CLI.

pub mod adapt;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod masking;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod stage1;
pub mod stage2;
pub mod tensor;
pub mod text;
pub mod util;

pub use error::{Result, VfmError};
pub use graph::{Graph, Var};
pub use tensor::{Scalar, TensorData};
