//! Minimal reverse-mode autodiff over `ndarray` dynamic arrays.
//!
//! A [`Tape`] records one computation graph per forward pass; [`Var`] is a
//! copyable handle into the tape. Calling [`Tape::backward`] on a scalar
//! node returns per-parameter and per-input gradients. The op set is the
//! closed set needed by the model: elementwise arithmetic with numpy-style
//! broadcasting, (batched) matmul, strided convolution, bilinear resampling,
//! average pooling, softmax / log-sum-exp, row normalization and row cosine.
//!
//! Everything is generic over [`Scalar`] so the same graph code runs at
//! `f32` for training and at `f64` for finite-difference gradient checks.

mod check;
mod store;
mod tape;

pub use check::{central_diff_grad, max_rel_error, GradCheckReport};
pub use store::{CountScope, ParamEntry, ParamId, ParamStore, Scope};
pub use tape::{concat, layer_norm, Gradients, Tape, Var};

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssignOps};

/// Floating-point element type usable on the tape.
pub trait Scalar:
    Float
    + NumAssignOps
    + ScalarOperand
    + LinalgScalar
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Identifier stored in checkpoint headers.
    const DTYPE: &'static str;
    /// Size of one element in bytes on disk.
    const BYTE_WIDTH: usize;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTE_WIDTH: usize = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTE_WIDTH: usize = 8;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

/// Shorthand for converting literals inside generic numeric code.
#[inline]
pub fn s<T: Scalar>(x: f64) -> T {
    T::from_f64(x)
}

/// Tape plus parameter store, as passed through module forwards.
#[derive(Clone, Copy)]
pub struct Ctx<'t, T: Scalar> {
    pub tape: &'t Tape<T>,
    pub store: &'t ParamStore<T>,
}

impl<'t, T: Scalar> Ctx<'t, T> {
    pub fn new(tape: &'t Tape<T>, store: &'t ParamStore<T>) -> Self {
        Self { tape, store }
    }

    /// Watch a parameter on the tape.
    pub fn p(&self, id: ParamId) -> Var<'t, T> {
        self.tape.param(self.store, id)
    }
}
