//! MIAN: a click-through-rate model that mines interactions between a candidate
//! item and a user's behavior sequence, profile and context.
//!
//! The crate is generic over the scalar type (`f32` or `f64`); the aliases at the
//! root fix it to `f64`.

pub mod ablation;
pub mod attention;
pub mod behavior;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod global;
pub mod init;
pub mod interaction;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod train;

pub use config::{Architecture, ModelConfig, Variant};
pub use data::{FieldValue, RawInstance, SynthConfig};
pub use embedding::Schema;
pub use error::{MianError, Result};
pub use scalar::Scalar;

pub type Matrix = numerics::DenseMatrix<f64>;
pub type Model = model::MianModel<f64>;
pub type Params = numerics::ParamStore<f64>;
pub type Prediction = model::Prediction<f64>;
