//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every operation eagerly computes its value and, when any input requires
//! gradients, records a backward closure onto the implicit tape formed by the
//! parent links. `backward` on a scalar walks the graph in reverse
//! topological order and accumulates gradients per node.
//!
//! Tensors are immutable; optimizer steps build fresh leaves. Nodes reached
//! only through inputs that do not require gradients keep no parent links, so
//! inference-time graphs collapse to plain buffers.
//!
//! Network training runs in `f32`; finite-difference verification
//! instantiates the same code at `f64`.

mod adamw;
mod gradcheck;
pub(crate) mod kernels;
mod ops;

pub use adamw::{AdamW, AdamWConfig, Params};
pub use gradcheck::{grad_check, grad_check_subset};

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt::{Debug, Display};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::Float;

/// Scalar element type of a tensor.
pub trait Real: Float + Debug + Display + Send + Sync + 'static {}
impl Real for f32 {}
impl Real for f64 {}

/// Shorthand conversion from an `f64` literal into any [`Real`].
#[inline]
pub fn c<F: Real>(x: f64) -> F {
    F::from(x).expect("literal convertible to Real")
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD_DEPTH: Cell<u32> = const { Cell::new(0) };
}

/// Runs `f` with tape recording disabled; useful for evaluation, sampling,
/// and stop-gradient branches.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
    let out = f();
    NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
    out
}

fn recording() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get()) == 0
}

type BackFn<F> = Box<dyn Fn(&[F], &mut Grads<F>)>;

struct Node<F: Real> {
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<F>>,
    needs_grad: bool,
    parents: Vec<Tensor<F>>,
    back: Option<BackFn<F>>,
}

/// Handle to an immutable tensor value, cheap to clone.
#[derive(Clone)]
pub struct Tensor<F: Real>(Rc<Node<F>>);

/// Gradients produced by [`Tensor::backward`], keyed by tensor identity.
pub struct Grads<F: Real> {
    map: HashMap<u64, Vec<F>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, t: &Tensor<F>) -> Option<&[F]> {
        self.map.get(&t.id()).map(|v| v.as_slice())
    }

    fn buf(&mut self, t: &Tensor<F>) -> &mut [F] {
        self.map
            .entry(t.id())
            .or_insert_with(|| vec![F::zero(); t.len()])
    }
}

impl<F: Real> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("needs_grad", &self.0.needs_grad)
            .finish()
    }
}

impl<F: Real> Tensor<F> {
    fn make(shape: Vec<usize>, data: Vec<F>, needs_grad: bool) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "dimension error in tensor construction: shape {:?} does not hold {} elements",
            shape,
            data.len()
        );
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: Rc::new(data),
            needs_grad,
            parents: vec![],
            back: None,
        }))
    }

    /// Constant (non-differentiable) tensor.
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Self {
        Self::make(shape.to_vec(), data, false)
    }

    /// Leaf that participates in gradient computation.
    pub fn param(shape: &[usize], data: Vec<F>) -> Self {
        Self::make(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(shape, vec![F::zero(); shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Self::from_vec(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: F) -> Self {
        Self::from_vec(&[1], vec![value])
    }

    /// Result of an operation. Parent links are kept only while recording
    /// and only if some input needs gradients.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<F>,
        parents: Vec<Tensor<F>>,
        back: BackFn<F>,
    ) -> Self {
        let needs_grad = recording() && parents.iter().any(|p| p.0.needs_grad);
        if !needs_grad {
            return Self::make(shape, data, false);
        }
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "dimension error in op output: shape {:?} does not hold {} elements",
            shape,
            data.len()
        );
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: Rc::new(data),
            needs_grad: true,
            parents,
            back: Some(back),
        }))
    }

    pub(crate) fn from_op_shared(
        shape: Vec<usize>,
        data: Rc<Vec<F>>,
        parents: Vec<Tensor<F>>,
        back: BackFn<F>,
    ) -> Self {
        let needs_grad = recording() && parents.iter().any(|p| p.0.needs_grad);
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            needs_grad,
            parents: if needs_grad { parents } else { vec![] },
            back: if needs_grad { Some(back) } else { None },
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.0.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<F>> {
        Rc::clone(&self.0.data)
    }

    pub fn needs_grad(&self) -> bool {
        self.0.needs_grad
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.len(), 1, "item() requires a scalar, got shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Same values, detached from the tape, not requiring gradients.
    pub fn detach(&self) -> Tensor<F> {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: self.0.shape.clone(),
            data: Rc::clone(&self.0.data),
            needs_grad: false,
            parents: vec![],
            back: None,
        }))
    }

    /// Reverse-mode sweep from a scalar. Returns gradients for every
    /// gradient-requiring tensor reachable from `self`.
    pub fn backward(&self) -> Grads<F> {
        assert_eq!(
            self.len(),
            1,
            "contract violation: backward requires a scalar loss, got shape {:?}",
            self.shape()
        );
        let mut grads = Grads { map: HashMap::new() };
        grads.map.insert(self.id(), vec![F::one()]);
        if !self.0.needs_grad {
            return grads;
        }

        // Reverse post-order DFS over parent links = topological order with
        // consumers before producers.
        let mut order: Vec<Tensor<F>> = vec![];
        let mut visited: HashSet<u64> = HashSet::new();
        visited.insert(self.id());
        let mut stack: Vec<(Tensor<F>, usize)> = vec![(self.clone(), 0)];
        while let Some((node, i)) = stack.pop() {
            if i < node.0.parents.len() {
                stack.push((node.clone(), i + 1));
                let p = node.0.parents[i].clone();
                if p.0.needs_grad && visited.insert(p.id()) {
                    stack.push((p, 0));
                }
            } else {
                order.push(node);
            }
        }

        for node in order.iter().rev() {
            let Some(back) = &node.0.back else { continue };
            let Some(g) = grads.map.get(&node.0.id).cloned() else { continue };
            back(&g, &mut grads);
        }
        grads
    }
}
