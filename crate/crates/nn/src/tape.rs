//! Reverse-mode differentiation over an append-only node list.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::params::ParamSet;
use crate::{Precision, Tensor};

/// Computes input gradients from the output gradient. The flags say which
/// inputs actually need one; entries for the others may be `None`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
    param: Option<(u64, usize)>,
}

/// Records operations so that gradients can be pulled back from a scalar.
///
/// A tape built with [`Tape::inference`] records values only, which is what
/// every evaluation path uses.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
    precision: Precision,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: true, precision }
    }

    pub fn inference(precision: Precision) -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: false, precision }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            requires_grad: false,
            backward: None,
            param: None,
        })
    }

    /// A free input whose gradient can be read back with [`Gradients::wrt`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            requires_grad: self.grad_enabled,
            backward: None,
            param: None,
        })
    }

    /// Records an operation with a hand-written backward rule.
    ///
    /// The rule is dropped when no input requires a gradient.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        value: Tensor,
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(Node {
            value: Rc::new(value),
            inputs: ids,
            requires_grad,
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
            param: None,
        })
    }

    /// Binds a parameter set to this tape. With `trainable == false` the
    /// parameters act as constants, so no weight gradients are computed.
    pub fn bind<'t, 'p>(&'t self, params: &'p ParamSet, trainable: bool) -> Bound<'t, 'p> {
        Bound {
            tape: self,
            params,
            trainable: trainable && self.grad_enabled,
            ids: RefCell::new(vec![None; params.len()]),
        }
    }

    /// Pulls gradients back from `loss`, seeding it with ones.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        let mut keep: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        keep.resize_with(nodes.len(), || None);
        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.backward {
                None => {
                    if node.requires_grad {
                        keep[id] = Some(grad);
                    }
                }
                Some(rule) => {
                    let needs: Vec<bool> =
                        node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
                    let input_grads = rule(&grad, &needs);
                    debug_assert_eq!(input_grads.len(), node.inputs.len());
                    for ((&input, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                        let (Some(g), true) = (g, need) else { continue };
                        debug_assert_eq!(g.shape(), nodes[input].value.shape());
                        match &mut grads[input] {
                            Some(acc) => acc.add_assign(&g),
                            slot => *slot = Some(g),
                        }
                    }
                }
            }
        }
        let params = nodes.iter().map(|n| n.param).collect();
        Gradients { grads: keep, params }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// The same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t> {
        let value = self.value();
        self.tape.push(Node {
            value,
            inputs: Vec::new(),
            requires_grad: false,
            backward: None,
            param: None,
        })
    }
}

/// Parameters of one network as seen by one tape.
pub struct Bound<'t, 'p> {
    tape: &'t Tape,
    params: &'p ParamSet,
    trainable: bool,
    ids: RefCell<Vec<Option<usize>>>,
}

impl<'t> Bound<'t, '_> {
    /// The parameter at `index`, recorded on first use.
    pub fn get(&self, index: usize) -> Var<'t> {
        if let Some(id) = self.ids.borrow()[index] {
            return Var { tape: self.tape, id };
        }
        self.params.note_read();
        let var = self.tape.push(Node {
            value: Rc::new(self.params.value(index).clone()),
            inputs: Vec::new(),
            requires_grad: self.trainable,
            backward: None,
            param: Some((self.params.id(), index)),
        });
        self.ids.borrow_mut()[index] = Some(var.id);
        var
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }
}

/// Gradients of leaves and trainable parameters after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<Option<(u64, usize)>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Per-parameter gradients of `set`, in parameter order. Parameters that
    /// were bound as constants or never used come back as `None`.
    pub fn for_params(&self, set: &ParamSet) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = vec![None; set.len()];
        for (id, key) in self.params.iter().enumerate() {
            if let Some((set_id, index)) = key {
                if *set_id == set.id() {
                    if let Some(g) = &self.grads[id] {
                        match &mut out[*index] {
                            Some(acc) => acc.add_assign(g),
                            slot => *slot = Some(g.clone()),
                        }
                    }
                }
            }
        }
        out
    }
}

static NEXT_SET_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn next_set_id() -> u64 {
    NEXT_SET_ID.fetch_add(1, Ordering::Relaxed)
}
