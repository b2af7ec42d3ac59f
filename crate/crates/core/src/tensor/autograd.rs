use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{ops, Real, Tensor};
use crate::error::{DfgError, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Restores the previous gradient-recording mode when dropped.
pub struct GradModeGuard {
    prev: bool,
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub(crate) fn set_grad_mode(enabled: bool) -> GradModeGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    GradModeGuard { prev }
}

/// Disables graph recording on this thread until the guard is dropped.
pub fn no_grad() -> GradModeGuard {
    set_grad_mode(false)
}

/// Vector-Jacobian product rule for a recorded operation.
///
/// `backward` receives the upstream gradient as a `Var` and must express the
/// input gradients with recorded ops, so that the result is differentiable
/// again when the caller asked for `create_graph`. Ops that compute their
/// gradient with raw kernels return `false` from `twice_differentiable`.
pub(crate) trait Backward<T: Real> {
    fn name(&self) -> &'static str;

    fn twice_differentiable(&self) -> bool {
        true
    }

    fn backward(
        &self,
        inputs: &[Var<T>],
        output: &Var<T>,
        grad: &Var<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Var<T>>>>;
}

struct Node<T: Real> {
    op: Box<dyn Backward<T>>,
    inputs: Vec<Var<T>>,
}

struct Inner<T: Real> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    node: Option<Node<T>>,
}

/// A tensor participating in a computation graph.
pub struct Var<T: Real>(Rc<Inner<T>>);

impl<T: Real> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Real> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("op", &self.op_name())
            .field("requires_grad", &self.0.requires_grad)
            .field("value", &self.0.value)
            .finish()
    }
}

impl<T: Real> Var<T> {
    pub fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Inner {
            id: next_id(),
            value,
            requires_grad,
            node: None,
        }))
    }

    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    pub fn parameter(value: Tensor<T>) -> Self {
        Self::leaf(value, true)
    }

    pub(crate) fn from_op(
        value: Tensor<T>,
        op: impl Backward<T> + 'static,
        inputs: Vec<Var<T>>,
    ) -> Self {
        let requires_grad = is_grad_enabled() && inputs.iter().any(Var::requires_grad);
        let node = requires_grad.then(|| Node {
            op: Box::new(op),
            inputs,
        });
        Var(Rc::new(Inner {
            id: next_id(),
            value,
            requires_grad,
            node,
        }))
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op.name())
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    pub fn item(&self) -> T {
        self.0.value.item()
    }
}

/// Nodes reachable from `root` through recorded edges, inputs before users.
fn topo_order<T: Real>(root: &Var<T>) -> Vec<Var<T>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    // (var, children pushed?)
    let mut stack = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !visited.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        if let Some(node) = &v.0.node {
            for input in node.inputs.iter().rev() {
                if input.requires_grad() && !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

/// Gradients of a scalar `output` with respect to each of `wrt`.
///
/// Variables that `output` does not depend on get a zero gradient. With
/// `create_graph` the returned gradients are recorded and may be
/// differentiated again; every op on the path must then support it.
pub fn grad<T: Real>(output: &Var<T>, wrt: &[Var<T>], create_graph: bool) -> Result<Vec<Var<T>>> {
    if output.value().numel() != 1 {
        return Err(DfgError::shape(format!(
            "gradient requires a scalar output, got shape {:?}",
            output.shape()
        )));
    }
    let targets: HashSet<u64> = wrt.iter().map(Var::id).collect();
    let order = topo_order(output);

    // A node is relevant when some target is reachable from it.
    let mut relevant = HashSet::new();
    for v in &order {
        let hit = targets.contains(&v.id())
            || v.0
                .node
                .as_ref()
                .is_some_and(|n| n.inputs.iter().any(|i| relevant.contains(&i.id())));
        if hit {
            relevant.insert(v.id());
        }
    }

    let mut grads: HashMap<u64, Var<T>> = HashMap::new();
    if relevant.contains(&output.id()) {
        grads.insert(output.id(), Var::constant(Tensor::ones(output.shape())));
    }

    let _mode = set_grad_mode(create_graph);
    for v in order.iter().rev() {
        if !relevant.contains(&v.id()) {
            continue;
        }
        let Some(node) = &v.0.node else { continue };
        let upstream = if targets.contains(&v.id()) {
            grads.get(&v.id()).cloned()
        } else {
            grads.remove(&v.id())
        };
        let Some(upstream) = upstream else { continue };
        if create_graph && !node.op.twice_differentiable() {
            return Err(DfgError::UnsupportedDoubleGrad {
                op: node.op.name(),
            });
        }
        let needs: Vec<bool> = node
            .inputs
            .iter()
            .map(|i| relevant.contains(&i.id()))
            .collect();
        let input_grads = node.op.backward(&node.inputs, v, &upstream, &needs)?;
        for ((input, g), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
            let (Some(g), true) = (g, *need) else { continue };
            if g.shape() != input.shape() {
                return Err(DfgError::shape(format!(
                    "backward of `{}` produced gradient {:?} for input {:?}",
                    node.op.name(),
                    g.shape(),
                    input.shape()
                )));
            }
            let acc = match grads.remove(&input.id()) {
                Some(prev) => ops::add(&prev, &g)?,
                None => g,
            };
            grads.insert(input.id(), acc);
        }
    }

    Ok(wrt
        .iter()
        .map(|w| {
            grads
                .get(&w.id())
                .cloned()
                .unwrap_or_else(|| Var::constant(Tensor::zeros(w.shape())))
        })
        .collect())
}

/// Gradient of `output` with respect to `wrt`, itself recorded on the graph.
pub fn grad_with_graph<T: Real>(output: &Var<T>, wrt: &Var<T>) -> Result<Var<T>> {
    Ok(grad(output, std::slice::from_ref(wrt), true)?.remove(0))
}

/// Gradient map keyed by leaf identity.
#[derive(Debug, Default)]
pub struct Gradients<T: Real> {
    map: HashMap<u64, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        self.map.get(&var.id())
    }

    /// Gradient for `var`, or zeros if the loss does not depend on it.
    pub fn get_or_zeros(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Gradients of a scalar loss with respect to every trainable leaf it reaches.
pub fn backward<T: Real>(loss: &Var<T>) -> Result<Gradients<T>> {
    let leaves: Vec<Var<T>> = topo_order(loss)
        .into_iter()
        .filter(|v| v.is_leaf() && v.requires_grad())
        .collect();
    let grads = grad(loss, &leaves, false)?;
    Ok(Gradients {
        map: leaves
            .iter()
            .zip(grads)
            .map(|(leaf, g)| (leaf.id(), g.value().clone()))
            .collect(),
    })
}
