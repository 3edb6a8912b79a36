//! Dense tensors, a tape-based reverse-mode autodiff engine, seeded sampling
//! and the Adam optimizer.
//!
//! Everything here is generic over [`Scalar`] so the same engine runs in
//! `f32` or `f64`; the rest of the crate uses the `f64` instantiation.

mod adam;
pub mod gradcheck;
mod graph;
mod kernels;
mod rng;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

pub use adam::{AdamConfig, AdamState};
pub use graph::{logsumexp, softmax_into, Graph, Var};
pub use rng::{sample_latents, Rng};
pub use tensor::Tensor;

/// Real scalar type the numerics engine is instantiated with.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Converts an `f64` literal; every finite `f64` is representable (possibly rounded).
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
}

impl NumericsError {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Self::Invalid {
            op,
            reason: reason.into(),
        }
    }
}

/// Row-wise softmax of a rank-2 tensor outside any graph.
pub fn softmax_rows<S: Scalar>(t: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, m) = t.dims2()?;
    let mut out = vec![S::zero(); n * m];
    for (row, dst) in t.data().chunks(m).zip(out.chunks_mut(m)) {
        softmax_into(row, dst);
    }
    Tensor::new(vec![n, m], out)
}

pub type Result<T> = std::result::Result<T, NumericsError>;
