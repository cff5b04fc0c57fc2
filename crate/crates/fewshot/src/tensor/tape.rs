use std::cell::{Cell, RefCell};
use std::rc::{Rc, Weak};

use super::{Scalar, Tensor, TensorError};

pub(crate) type BackFn<F> = Box<dyn Fn(&Tensor<F>, &mut dyn FnMut(usize, Tensor<F>))>;

pub(crate) struct Node<F: Scalar> {
    // None for leaves. For interior nodes the closure maps an upstream
    // cotangent to cotangents of the node's inputs, emitted by node id.
    back: Option<BackFn<F>>,
}

pub struct TapeInner<F: Scalar> {
    generation: Cell<u64>,
    nodes: RefCell<Vec<Rc<Node<F>>>>,
    // Node ids below this had their backward run without create_graph; their
    // intermediate state counts as freed and cannot be differentiated again.
    consumed: Cell<usize>,
}

/// A tensor's link back to the tape node that produced it. Stale links
/// (rewound generation, dropped tape) are treated as absent.
pub(crate) struct TrackSlot<F: Scalar> {
    pub tape: Weak<TapeInner<F>>,
    pub generation: u64,
    pub id: usize,
}

/// Recording context for reverse-mode autodiff. While a [`TapeScope`] from
/// this tape is alive on the current thread, every op touching a
/// grad-enabled tensor appends a node here.
pub struct Tape<F: Scalar = f32> {
    inner: Rc<TapeInner<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TapeMark {
    len: usize,
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(TapeInner {
                generation: Cell::new(0),
                nodes: RefCell::new(Vec::new()),
                consumed: Cell::new(0),
            }),
        }
    }

    /// Makes this tape the active recording target until the guard drops.
    pub fn scope(&self) -> TapeScope<F> {
        F::tape_stack().with(|s| s.borrow_mut().push(Rc::clone(&self.inner)));
        TapeScope {
            _inner: Rc::clone(&self.inner),
            _not_send: std::marker::PhantomData,
        }
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn checkpoint(&self) -> TapeMark {
        TapeMark { len: self.len() }
    }

    /// Drops everything recorded after `mark` and invalidates all tensors'
    /// graph links (they become fresh leaves on next use). Bounds memory in
    /// long training loops: checkpoint per step, rewind after the update.
    pub fn rewind(&self, mark: TapeMark) {
        let mut nodes = self.inner.nodes.borrow_mut();
        nodes.truncate(mark.len);
        self.inner.generation.set(self.inner.generation.get() + 1);
        self.inner
            .consumed
            .set(self.inner.consumed.get().min(mark.len));
    }
}

pub struct TapeScope<F: Scalar> {
    _inner: Rc<TapeInner<F>>,
    _not_send: std::marker::PhantomData<*const ()>,
}

impl<F: Scalar> Drop for TapeScope<F> {
    fn drop(&mut self) {
        F::tape_stack().with(|s| {
            s.borrow_mut().pop();
        });
    }
}

thread_local! {
    static NO_GRAD_DEPTH: Cell<u32> = const { Cell::new(0) };
}

/// Suppresses recording until the guard drops, regardless of active tapes.
pub fn no_grad() -> NoGradGuard {
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
    NoGradGuard {
        _not_send: std::marker::PhantomData,
    }
}

pub struct NoGradGuard {
    _not_send: std::marker::PhantomData<*const ()>,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

pub(crate) fn recording_active<F: Scalar>() -> Option<Rc<TapeInner<F>>> {
    if NO_GRAD_DEPTH.with(|d| d.get()) > 0 {
        return None;
    }
    F::tape_stack().with(|s| s.borrow().last().cloned())
}

impl<F: Scalar> TapeInner<F> {
    /// Node id of `t` on this tape, registering it as a leaf if it has no
    /// valid link here.
    pub(crate) fn leaf_id(self: &Rc<Self>, t: &Tensor<F>) -> usize {
        {
            let st = t.track_ref().borrow();
            if let Some(tr) = st.link.as_ref() {
                if tr.generation == self.generation.get() {
                    if let Some(owner) = tr.tape.upgrade() {
                        if Rc::ptr_eq(&owner, self) {
                            return tr.id;
                        }
                    }
                }
            }
        }
        let id = self.push_node(None);
        t.set_tracked(TrackSlot {
            tape: Rc::downgrade(self),
            generation: self.generation.get(),
            id,
        });
        id
    }

    pub(crate) fn push_node(&self, back: Option<BackFn<F>>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Rc::new(Node { back }));
        nodes.len() - 1
    }

    pub(crate) fn track_slot(self: &Rc<Self>, id: usize) -> TrackSlot<F> {
        TrackSlot {
            tape: Rc::downgrade(self),
            generation: self.generation.get(),
            id,
        }
    }
}

/// Result of a backward pass: cotangents for every node that received one,
/// queried per tensor. Tensors without a recorded gradient yield `None`.
pub struct Gradients<F: Scalar> {
    tape: Weak<TapeInner<F>>,
    generation: u64,
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn wrt(&self, t: &Tensor<F>) -> Option<Tensor<F>> {
        let st = t.track_ref().borrow();
        let tr = st.link.as_ref()?;
        if tr.generation != self.generation {
            return None;
        }
        let owner = tr.tape.upgrade()?;
        let mine = self.tape.upgrade()?;
        if !Rc::ptr_eq(&owner, &mine) {
            return None;
        }
        self.grads.get(tr.id).and_then(|g| g.clone())
    }
}

impl<F: Scalar> Tensor<F> {
    /// Reverse-mode sweep from this scalar. With `create_graph` the cotangent
    /// computations are themselves recorded, so the returned gradients can be
    /// differentiated again; without it the walked region of the tape is
    /// marked consumed and a second backward through it errors.
    pub fn backward(&self, create_graph: bool) -> Result<Gradients<F>, TensorError> {
        if self.len() != 1 {
            return Err(TensorError::NotAScalar {
                shape: self.shape().to_vec(),
            });
        }
        let (tape, loss_id) = {
            let st = self.track_ref().borrow();
            let tr = st.link.as_ref().ok_or(TensorError::NoTape)?;
            let tape = tr.tape.upgrade().ok_or(TensorError::NoTape)?;
            if tr.generation != tape.generation.get() {
                return Err(TensorError::NoTape);
            }
            (tape, tr.id)
        };

        // Cotangent math either records onto the same tape (create_graph) or
        // is explicitly suppressed, independent of the caller's context.
        enum Ctx<F: Scalar> {
            #[allow(dead_code)]
            Rec(TapeScope<F>),
            #[allow(dead_code)]
            Silent(NoGradGuard),
        }
        let _ctx = if create_graph {
            Ctx::Rec(Tape { inner: Rc::clone(&tape) }.scope())
        } else {
            Ctx::Silent(no_grad())
        };

        let mut grads: Vec<Option<Tensor<F>>> = Vec::new();
        grads.resize_with(loss_id + 1, || None);
        grads[loss_id] = Some(Tensor::ones(&[1]));

        let consumed = tape.consumed.get();
        for id in (0..=loss_id).rev() {
            let Some(cot) = grads[id].take() else { continue };
            let node = {
                let nodes = tape.nodes.borrow();
                Rc::clone(&nodes[id])
            };
            let Some(back) = node.back.as_ref() else {
                // Leaf: keep the accumulated gradient.
                grads[id] = Some(cot);
                continue;
            };
            if id < consumed {
                return Err(TensorError::TapeConsumed);
            }
            back(&cot, &mut |input_id, piece| {
                debug_assert!(input_id < id);
                grads[input_id] = Some(match grads[input_id].take() {
                    None => piece,
                    Some(acc) => acc.add(&piece).expect("cotangent shape"),
                });
            });
        }

        if !create_graph {
            tape.consumed.set(consumed.max(loss_id + 1));
        }
        Ok(Gradients {
            tape: Rc::downgrade(&tape),
            generation: tape.generation.get(),
            grads,
        })
    }
}
