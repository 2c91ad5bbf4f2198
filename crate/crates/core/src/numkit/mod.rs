//! Dense tensors, a reverse-mode tape over a fixed set of primitives, a
//! central-difference gradient checker, and the named-tensor container.
//!
//! The core is generic over [`Real`] so adjoints can be audited in `f64`;
//! everything else in the crate runs on `f32` with reductions accumulated
//! in `f64`.

mod container;
mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use container::{read_tensors, write_tensors, NamedTensors, MAGIC};
pub use gradcheck::finite_difference_check;
pub use tape::{Tape, Var, RMS_EPS};
pub use tensor::{Tensor, TensorId};

use num_traits::Float;

/// Floating-point element type of a [`Tensor`].
pub trait Real: Float + Send + Sync + Default + std::fmt::Debug + 'static {
    fn as_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Real for f32 {
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}
