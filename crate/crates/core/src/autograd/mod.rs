//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every backward rule is written in terms of differentiable [`Var`]
//! operations, so gradients can themselves be differentiated when
//! [`grad`] is called with `create_graph = true`. The R1 penalty relies
//! on this: it backpropagates through `‖∇ₓD(x)‖²` into the discriminator
//! weights.
//!
//! Graphs are reference counted and single threaded. A thread-local
//! switch ([`no_grad`]) disables recording for inference paths.

mod ops;
mod spatial;

use std::cell::Cell;
use std::collections::hash_map::Entry;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::tensor::{Real, Tensor};

pub use spatial::{ConvGeometry, Resampler};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static MAC_COUNT: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Whether operations currently record a graph.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Restores the previous recording mode when dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

/// Disable graph recording until the returned guard is dropped.
pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    NoGradGuard { prev }
}

/// Multiply-accumulates performed by matrix products on this thread.
pub fn mac_count() -> u64 {
    MAC_COUNT.with(|c| c.get())
}

/// Run `f` and return its result with the number of matrix-product
/// multiply-accumulates it executed.
pub fn count_macs_of<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = mac_count();
    let out = f();
    (out, mac_count() - before)
}

pub(crate) fn record_macs(n: u64) {
    MAC_COUNT.with(|c| c.set(c.get() + n));
}

pub(crate) struct BackwardCtx<'a, T: Real> {
    pub grad: &'a Var<T>,
    pub inputs: &'a [Var<T>],
    pub output: &'a Var<T>,
    pub needs: &'a [bool],
}

pub(crate) trait Backward<T: Real> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Var<T>>>;
}

struct Node<T: Real> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<Var<T>>,
    backward: Option<Box<dyn Backward<T>>>,
}

/// A tensor value that participates in gradient computation.
#[derive(Clone)]
pub struct Var<T: Real>(Rc<Node<T>>);

impl<T: Real> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("value", &self.0.value)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Real> Var<T> {
    /// A value that never receives gradients.
    pub fn constant(value: Tensor<T>) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: false,
            inputs: Vec::new(),
            backward: None,
        }))
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn leaf(value: Tensor<T>) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            inputs: Vec::new(),
            backward: None,
        }))
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Tensor::scalar(T::of(v)))
    }

    pub(crate) fn from_op(
        value: Tensor<T>,
        inputs: Vec<Var<T>>,
        backward: impl Backward<T> + 'static,
    ) -> Self {
        let requires_grad = grad_enabled() && inputs.iter().any(|v| v.requires_grad());
        if requires_grad {
            Var(Rc::new(Node {
                id: next_id(),
                value,
                requires_grad,
                inputs,
                backward: Some(Box::new(backward)),
            }))
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn rank(&self) -> usize {
        self.0.value.rank()
    }

    pub fn numel(&self) -> usize {
        self.0.value.numel()
    }

    pub fn item(&self) -> T {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }
}

/// Gradients of a scalar `output` with respect to each of `wrt`.
///
/// With `create_graph` the returned gradients are themselves part of a
/// graph and can be differentiated again. Variables that do not influence
/// `output` receive zero gradients.
pub fn grad<T: Real>(output: &Var<T>, wrt: &[&Var<T>], create_graph: bool) -> Vec<Var<T>> {
    assert_eq!(
        output.numel(),
        1,
        "grad() needs a scalar output, got shape {:?}",
        output.shape()
    );
    let _guard = (!create_graph).then(no_grad);

    let wrt_ids: HashSet<u64> = wrt.iter().map(|v| v.id()).collect();
    let order = topo_order(output);

    // A node is needed when some target is reachable through its inputs.
    let mut needed: HashSet<u64> = HashSet::new();
    for v in &order {
        if wrt_ids.contains(&v.id()) || v.0.inputs.iter().any(|i| needed.contains(&i.id())) {
            needed.insert(v.id());
        }
    }

    let mut grads: HashMap<u64, Var<T>> = HashMap::new();
    if needed.contains(&output.id()) {
        grads.insert(
            output.id(),
            Var::constant(Tensor::ones(output.shape())),
        );
    }
    let mut results: HashMap<u64, Var<T>> = HashMap::new();

    for v in order.iter().rev() {
        let Some(g) = grads.remove(&v.id()) else {
            continue;
        };
        if wrt_ids.contains(&v.id()) {
            results.insert(v.id(), g.clone());
        }
        let node = &v.0;
        let Some(rule) = &node.backward else {
            continue;
        };
        let needs: Vec<bool> = node
            .inputs
            .iter()
            .map(|i| i.requires_grad() && needed.contains(&i.id()))
            .collect();
        if !needs.iter().any(|&n| n) {
            continue;
        }
        let input_grads = rule.backward(&BackwardCtx {
            grad: &g,
            inputs: &node.inputs,
            output: v,
            needs: &needs,
        });
        debug_assert_eq!(input_grads.len(), node.inputs.len());
        for ((input, gi), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
            let (true, Some(gi)) = (*need, gi) else {
                continue;
            };
            debug_assert_eq!(gi.shape(), input.shape(), "gradient shape mismatch");
            match grads.entry(input.id()) {
                Entry::Occupied(mut e) => {
                    let sum = e.get().add(&gi);
                    e.insert(sum);
                }
                Entry::Vacant(e) => {
                    e.insert(gi);
                }
            }
        }
    }

    wrt.iter()
        .map(|w| {
            results
                .remove(&w.id())
                .unwrap_or_else(|| Var::constant(Tensor::zeros(w.shape())))
        })
        .collect()
}

/// Post-order (inputs before outputs) over nodes that require gradients.
fn topo_order<T: Real>(root: &Var<T>) -> Vec<Var<T>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    visited.insert(root.id());
    let mut stack: Vec<(Var<T>, usize)> = vec![(root.clone(), 0)];
    while let Some((v, idx)) = stack.pop() {
        if idx < v.0.inputs.len() {
            let child = v.0.inputs[idx].clone();
            stack.push((v, idx + 1));
            if child.requires_grad() && visited.insert(child.id()) {
                stack.push((child, 0));
            }
        } else {
            order.push(v);
        }
    }
    order
}
