//! Dense row-major tensors and the forward/backward primitives of the
//! convolutional network.
//!
//! Every op is a pure function over borrowed inputs. All public operations
//! check that their outputs are finite and surface [`TensorError::NonFinite`]
//! instead of letting a NaN travel through the network.

mod conv;
mod dense;
mod gemm;
mod pool;

use std::fmt;

use num_traits::Float;
use thiserror::Error;

pub use conv::{conv2d, conv2d_backward, Conv2dGrads, ConvGeometry};
pub use dense::{affine, affine_backward, relu, relu_backward, AffineGrads};
pub use pool::{
    global_avg_pool, global_avg_pool_backward, maxpool2d, maxpool2d_backward, PoolIndices,
};

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: dimension `{dim}` mismatch (expected {expected}, got {actual})")]
    DimMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: kernel extent {kernel} along `{dim}` exceeds padded input extent {padded}")]
    KernelTooLarge {
        op: &'static str,
        dim: &'static str,
        kernel: usize,
        padded: usize,
    },
    #[error("{op}: `{param}` must be at least 1")]
    ZeroParam {
        op: &'static str,
        param: &'static str,
    },
    #[error("shape {shape:?} holds {expected} elements but the buffer has {actual}")]
    Length {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} has a zero-sized or missing dimension")]
    EmptyShape(Vec<usize>),
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
}

/// Element type tag, shared with the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElemType {
    F32,
    F64,
}

impl ElemType {
    pub fn tag(self) -> u8 {
        match self {
            ElemType::F32 => 0,
            ElemType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ElemType::F32),
            1 => Some(ElemType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            ElemType::F32 => 4,
            ElemType::F64 => 8,
        }
    }
}

impl fmt::Display for ElemType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ElemType::F32 => "f32",
            ElemType::F64 => "f64",
        })
    }
}

/// Floating point element of a tensor. Implemented for `f32` (training) and
/// `f64` (gradient checking).
pub trait Scalar:
    Float
    + Default
    + fmt::Debug
    + fmt::Display
    + fmt::LowerExp
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    const ELEM: ElemType;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one element from exactly `ELEM.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    /// `c = alpha * a * b + beta * c` over raw strided views.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// views, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const ELEM: ElemType = ElemType::F32;

    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte f32"))
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const ELEM: ElemType = ElemType::F64;

    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte f64"))
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense n-dimensional array in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Wraps `data` with `shape`, rejecting length mismatches, zero-sized
    /// dimensions and non-finite scalars.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected = checked_numel(&shape)?;
        if expected != data.len() {
            return Err(TensorError::Length {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Tensor { shape, data }.finite("Tensor::new")
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        let n = checked_numel(&shape)?;
        Tensor {
            shape,
            data: vec![value; n],
        }
        .finite("Tensor::full")
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = shape.into();
        let n = checked_numel(&shape)?;
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
        .finite("Tensor::from_fn")
    }

    /// Builds a tensor whose finiteness the caller has already established.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub(crate) fn finite(self, op: &'static str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Mutable access for in-place updates. Callers that write through this
    /// take over responsibility for the finiteness invariant.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let expected = checked_numel(&shape)?;
        if expected != self.data.len() {
            return Err(TensorError::Length {
                shape,
                expected,
                actual: self.data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [a, b] => Ok((a, b)),
            _ => Err(self.rank_error(op, 2)),
        }
    }

    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(self.rank_error(op, 3)),
        }
    }

    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(self.rank_error(op, 4)),
        }
    }

    fn rank_error(&self, op: &'static str, expected: usize) -> TensorError {
        TensorError::Rank {
            op,
            expected,
            shape: self.shape.clone(),
        }
    }

    /// Contiguous slice of the `i`-th entry along the leading axis.
    pub fn row(&self, i: usize) -> &[T] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn scale(&self, factor: T) -> Result<Self> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v * factor).collect(),
        }
        .finite("scale")
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| TensorError::EmptyShape(vec![0]))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.len() * items.len());
        for item in items {
            if item.shape != first.shape {
                return Err(TensorError::DimMismatch {
                    op: "stack",
                    dim: "item",
                    expected: first.len(),
                    actual: item.len(),
                });
            }
            data.extend_from_slice(&item.data);
        }
        Ok(Tensor { shape, data })
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?} ...", &self.data[..SHOWN])
        }
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::EmptyShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}
