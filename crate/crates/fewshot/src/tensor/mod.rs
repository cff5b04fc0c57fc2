//! Dense tensors with reverse-mode autodiff.
//!
//! Gradients are recorded on an explicit [`Tape`]. Backward passes can
//! themselves be recorded (`create_graph`), which is what makes second-order
//! meta-learning possible: the backward closure of every operation computes
//! its input cotangents through the same public ops, so differentiating a
//! gradient is just another backward pass.

mod check;
mod ops;
mod tape;

pub use check::{finite_diff_grad, gradcheck, run_gradcheck_suite, CheckLine};
pub use ops::{
    batch_norm, bce_with_logits, conv2d, linear, mse, softmax, softmax_cross_entropy, BnMode,
};
pub use tape::{no_grad, Gradients, Tape, TapeMark};

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use tape::TrackSlot;

/// Autodiff state shared by all clones of a tensor: whether ops involving it
/// record, and its link to the tape node that produced it. Shared (not
/// copied) so that tracking a freshly produced tensor is visible to clones
/// already captured in backward closures.
pub(crate) struct TrackState<F: Scalar> {
    pub grad_enabled: bool,
    pub link: Option<TrackSlot<F>>,
}

/// Element type of a [`Tensor`]. `f32` is the working precision; `f64` exists
/// so gradient oracles can run without float noise drowning the comparison.
pub trait Scalar:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maxv(self, other: Self) -> Self;
    fn minv(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    #[doc(hidden)]
    fn tape_stack() -> &'static std::thread::LocalKey<RefCell<Vec<Rc<tape::TapeInner<Self>>>>>;
}

macro_rules! impl_scalar {
    ($t:ty, $stack:ident) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn maxv(self, other: Self) -> Self {
                self.max(other)
            }
            fn minv(self, other: Self) -> Self {
                self.min(other)
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            fn tape_stack(
            ) -> &'static std::thread::LocalKey<RefCell<Vec<Rc<tape::TapeInner<Self>>>>> {
                thread_local! {
                    static $stack: RefCell<Vec<Rc<tape::TapeInner<$t>>>> =
                        RefCell::new(Vec::new());
                }
                &$stack
            }
        }
    };
}

impl_scalar!(f32, STACK_F32);
impl_scalar!(f64, STACK_F64);

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {details}")]
    InvalidShape { op: &'static str, details: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotAScalar { shape: Vec<usize> },
    #[error("tape consumed: intermediate results were freed by a previous backward without create_graph")]
    TapeConsumed,
    #[error("tensor is not attached to a live tape (no gradient was recorded for it)")]
    NoTape,
    #[error("label {index} out of range for {n_classes} classes")]
    InvalidLabel { index: usize, n_classes: usize },
    #[error("{op}: needs a batch of at least 2 in training mode, got {batch}")]
    BatchTooSmall { op: &'static str, batch: usize },
}

/// Dense row-major tensor. Cloning is cheap (data is shared); all operations
/// produce fresh tensors. A tensor participates in autodiff when
/// `grad_enabled` is set and a tape is active at the time an op runs.
pub struct Tensor<F: Scalar = f32> {
    data: Rc<Vec<F>>,
    shape: Vec<usize>,
    track: Rc<RefCell<TrackState<F>>>,
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            data: Rc::clone(&self.data),
            shape: self.shape.clone(),
            track: Rc::clone(&self.track),
        }
    }
}

fn fresh_track<F: Scalar>(grad_enabled: bool) -> Rc<RefCell<TrackState<F>>> {
    Rc::new(RefCell::new(TrackState {
        grad_enabled,
        link: None,
    }))
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.len() <= 8 {
            write!(f, " {:?}", &self.data[..])
        } else {
            write!(f, " [{:?}, {:?}, ...]", self.data[0], self.data[1])
        }
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(data: Vec<F>, shape: &[usize]) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::InvalidShape {
                op: "from_vec",
                details: format!("shape {:?} wants {} elements, got {}", shape, n, data.len()),
            });
        }
        Ok(Tensor {
            data: Rc::new(data),
            shape: shape.to_vec(),
            track: fresh_track(false),
        })
    }

    pub(crate) fn plain(data: Vec<F>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            data: Rc::new(data),
            shape,
            track: fresh_track(false),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::plain(vec![F::ZERO; shape.iter().product()], shape.to_vec())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::plain(vec![F::ONE; shape.iter().product()], shape.to_vec())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Tensor::plain(vec![value; shape.iter().product()], shape.to_vec())
    }

    pub fn scalar(value: F) -> Self {
        Tensor::plain(vec![value], vec![1])
    }

    /// Marks this tensor as a differentiation leaf. Ops involving it will be
    /// recorded whenever a tape is active.
    pub fn requires_grad(mut self) -> Self {
        self.track = fresh_track(true);
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.track.borrow().grad_enabled
    }

    /// Same data, cut off from any recorded history.
    pub fn detach(&self) -> Self {
        Tensor {
            data: Rc::clone(&self.data),
            shape: self.shape.clone(),
            track: fresh_track(false),
        }
    }

    /// Same data as a fresh differentiation leaf (detach + requires_grad).
    pub fn releaf(&self) -> Self {
        Tensor {
            data: Rc::clone(&self.data),
            shape: self.shape.clone(),
            track: fresh_track(true),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor::plain(
            self.data.iter().map(|v| G::from_f64(v.to_f64())).collect(),
            self.shape.clone(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn track_ref(&self) -> &Rc<RefCell<TrackState<F>>> {
        &self.track
    }

    /// Attaches this tensor (and every clone sharing its state) to a tape
    /// node, in place.
    pub(crate) fn set_tracked(&self, slot: TrackSlot<F>) {
        let mut st = self.track.borrow_mut();
        st.grad_enabled = true;
        st.link = Some(slot);
    }
}
