//! Model inversion with intra-class prototypes and an inter-class memory bank.

pub mod attack;
pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod prototypes;
pub mod theory;

pub use error::{Error, Result};
pub use numerics::{Scalar, Tensor};

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Graph64 = numerics::Graph<f64>;
