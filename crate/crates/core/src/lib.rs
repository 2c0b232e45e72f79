//! DC-Mamber: a dual-channel forecaster for multivariate time series.
//!
//! A linear-attention encoder mixes information across time steps while a
//! bidirectional selective-SSM encoder models each variable's series as a
//! token. Their representations are aligned and fused before a linear head
//! predicts the horizon.

pub mod attention;
pub mod autograd;
pub mod data;
pub mod error;
pub mod kv;
pub mod layers;
pub mod model;
pub mod ops;
pub mod params;
pub mod rng;
pub mod ssm;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
