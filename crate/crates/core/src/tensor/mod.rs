//! Dense N-dimensional arrays with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is an immutable value (shape + contiguous buffer) with an
//! optional gradient buffer; [`Tape`] records operations define-by-run and
//! replays them in reverse. Data buffers are shared via `Arc` so read-only
//! parameter snapshots can cross threads, while tensors and tapes themselves
//! stay single-threaded.
//!
//! Default precision is `f32`; every op is also instantiated for `f64`,
//! which exists for the finite-difference gradient checks.

mod kernels;
mod tape;

pub mod gradcheck;
pub mod snapshot;

pub use tape::Tape;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use num_traits::Float;
use thiserror::Error;

/// Scalar element type of a [`Tensor`]. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
}

/// Element type tag used by the snapshot format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shapes {lhs:?} and {rhs:?} are not compatible")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: channel count mismatch, expected {expected}, got {got}")]
    ChannelMismatch { op: &'static str, expected: usize, got: usize },
    #[error("{op}: output extent would be non-positive for input {input:?} with kernel {kernel}, stride {stride}, padding {padding}")]
    EmptyOutput { op: &'static str, input: Vec<usize>, kernel: usize, stride: usize, padding: usize },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward: loss must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

struct TensorInner<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
}

/// A dense N-d array. Cheap to clone (shared buffer); the shape and the data
/// are fixed at construction, only the gradient buffer mutates.
pub struct Tensor<T: Scalar> {
    inner: Rc<TensorInner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match buffer length {}",
            shape,
            data.len()
        );
        Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: Arc::new(data),
                requires_grad: false,
                grad: RefCell::new(None),
            }),
        }
    }

    /// Leaf sharing an existing buffer, optionally participating in autodiff.
    pub fn from_shared(shape: Vec<usize>, data: Arc<Vec<T>>, requires_grad: bool) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(TensorInner { shape, data, requires_grad, grad: RefCell::new(None) }),
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor::from_vec(vec![1], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![T::zero(); n])
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![T::one(); n])
    }

    pub fn ones_like(&self) -> Self {
        Tensor::ones(self.shape().to_vec())
    }

    /// Marks this leaf as requiring gradients. Consumes and rebuilds the
    /// handle so the flag stays fixed after construction.
    pub fn requires_grad(self) -> Self {
        Tensor {
            inner: Rc::new(TensorInner {
                shape: self.inner.shape.clone(),
                data: Arc::clone(&self.inner.data),
                requires_grad: true,
                grad: RefCell::new(self.inner.grad.borrow().clone()),
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.inner.data)
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn item(&self) -> T {
        assert!(self.is_scalar(), "item() on non-scalar tensor {:?}", self.shape());
        self.inner.data[0]
    }

    pub fn needs_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Current gradient, cloned out. `None` until a backward pass touches it.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Adds `delta` elementwise into the gradient buffer, allocating zeros on
    /// first touch. Accumulation across backward calls is additive; resetting
    /// is the caller's job.
    pub fn accumulate_grad(&self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.numel());
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(delta) {
                    *b += *d;
                }
            }
            None => *g = Some(delta.to_vec()),
        }
    }

    pub(crate) fn accumulate_grad_owned(&self, delta: Vec<T>) {
        debug_assert_eq!(delta.len(), self.numel());
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(&delta) {
                    *b += *d;
                }
            }
            None => *g = Some(delta),
        }
    }

    pub(crate) fn has_grad(&self) -> bool {
        self.inner.grad.borrow().is_some()
    }

    /// Runs `f` with a borrow of the gradient buffer, if present.
    pub(crate) fn with_grad<R>(&self, f: impl FnOnce(&[T]) -> R) -> Option<R> {
        self.inner.grad.borrow().as_deref().map(f)
    }
}

/// Broadcast two shapes under trailing-dimension rules.
///
/// Shapes are right-aligned; each aligned pair of extents must be equal or
/// one of them 1. Returns the broadcast shape.
pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
        }
    }
    Ok(out)
}
