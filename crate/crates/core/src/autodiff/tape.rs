use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::array::Array;
use super::ops::{vjp, Op};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Append-only record of primitive operations.
///
/// Parents are always pushed before their children, so node ids are a
/// topological order. A backward pass run with `create_graph` records its
/// own operations on the same tape, which makes the returned gradients
/// differentiable again.
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

pub(crate) struct Node {
    op: Op,
    inputs: Vec<Input>,
    value: Rc<Array>,
}

#[derive(Clone)]
pub(crate) enum Input {
    Node(NodeId),
    Const(Rc<Array>),
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a differentiable leaf.
    pub fn var(&self, value: Array) -> Tensor {
        let value = Rc::new(value);
        let id = self.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: value.clone(),
        });
        Tensor {
            value,
            tracked: Some(Tracked {
                tape: self.clone(),
                id,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    fn handle(&self, id: NodeId, value: Rc<Array>, tracked: bool) -> Tensor {
        Tensor {
            value,
            tracked: tracked.then(|| Tracked {
                tape: self.clone(),
                id,
            }),
        }
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

#[derive(Clone)]
struct Tracked {
    tape: Tape,
    id: NodeId,
}

/// A value, optionally attached to a tape node.
///
/// Tensors without a node are constants: operations on them are evaluated
/// but not recorded.
#[derive(Clone)]
pub struct Tensor {
    value: Rc<Array>,
    tracked: Option<Tracked>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.value.shape())
            .field("node", &self.node_id())
            .finish()
    }
}

impl Tensor {
    pub fn constant(value: Array) -> Self {
        Tensor {
            value: Rc::new(value),
            tracked: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::constant(Array::scalar(value))
    }

    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tracked.is_some()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.tracked.as_ref().map(|t| t.id)
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.tracked.as_ref().map(|t| &t.tape)
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor {
            value: self.value.clone(),
            tracked: None,
        }
    }

    pub(crate) fn record(op: Op, inputs: &[&Tensor], value: Array) -> Result<Tensor> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let mut tape: Option<&Tape> = None;
        for t in inputs {
            if let Some(tr) = &t.tracked {
                match tape {
                    None => tape = Some(&tr.tape),
                    Some(existing) if !existing.same(&tr.tape) => {
                        return Err(Error::TapeMismatch(op.name()))
                    }
                    Some(_) => {}
                }
            }
        }
        let value = Rc::new(value);
        let Some(tape) = tape else {
            return Ok(Tensor {
                value,
                tracked: None,
            });
        };
        let inputs = inputs
            .iter()
            .map(|t| match &t.tracked {
                Some(tr) => Input::Node(tr.id),
                None => Input::Const(t.value.clone()),
            })
            .collect();
        let id = tape.push(Node {
            op,
            inputs,
            value: value.clone(),
        });
        Ok(Tensor {
            value,
            tracked: Some(Tracked {
                tape: tape.clone(),
                id,
            }),
        })
    }
}

/// Reverse-mode gradient of a scalar `output` with respect to each of `wrt`.
///
/// Tensors that do not influence `output` get zeros. With `create_graph`
/// the backward computation is itself recorded, so the returned tensors can
/// be fed into further losses and differentiated again.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if output.numel() != 1 {
        return Err(Error::NonScalarOutput(output.shape().to_vec()));
    }
    let zeros = |t: &Tensor| Tensor::constant(Array::zeros(t.shape()));
    let Some(out) = &output.tracked else {
        return Ok(wrt.iter().map(|t| zeros(t)).collect());
    };
    let tape = out.tape.clone();
    let n = out.id + 1;

    // Nodes on a path from some wrt tensor to the output.
    let mut reach = vec![false; n];
    for t in wrt {
        if let Some(tr) = &t.tracked {
            if tr.tape.same(&tape) && tr.id < n {
                reach[tr.id] = true;
            }
        }
    }
    {
        let nodes = tape.nodes.borrow();
        for i in 0..n {
            if !reach[i] {
                reach[i] = nodes[i]
                    .inputs
                    .iter()
                    .any(|inp| matches!(inp, Input::Node(p) if reach[*p]));
            }
        }
    }

    let mut grads: Vec<Option<Tensor>> = vec![None; n];
    grads[out.id] = Some(Tensor::constant(Array::ones(output.shape())));

    for i in (0..n).rev() {
        if !reach[i] {
            continue;
        }
        let Some(g) = grads[i].take() else { continue };
        let (op, inputs, value) = {
            let nodes = tape.nodes.borrow();
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            (node.op.clone(), node.inputs.clone(), node.value.clone())
        };
        let handles: Vec<Tensor> = {
            let nodes = tape.nodes.borrow();
            inputs
                .iter()
                .map(|inp| match inp {
                    Input::Node(p) => tape.handle(*p, nodes[*p].value.clone(), create_graph),
                    Input::Const(a) => Tensor {
                        value: a.clone(),
                        tracked: None,
                    },
                })
                .collect()
        };
        let out_handle = tape.handle(i, value, create_graph);
        let needed: Vec<bool> = inputs
            .iter()
            .map(|inp| matches!(inp, Input::Node(p) if reach[*p]))
            .collect();
        let input_grads = vjp(&op, &handles, &out_handle, &g, &needed)?;
        for ((inp, gi), need) in inputs.iter().zip(input_grads).zip(&needed) {
            if let (Input::Node(p), Some(gi), true) = (inp, gi, need) {
                grads[*p] = Some(match grads[*p].take() {
                    Some(acc) => acc.add(&gi)?,
                    None => gi,
                });
            }
        }
        // Interior node that is also a wrt target keeps its total gradient.
        if wrt
            .iter()
            .any(|t| t.node_id() == Some(i) && t.tape().is_some_and(|tp| tp.same(&tape)))
        {
            grads[i] = Some(g);
        }
    }

    Ok(wrt
        .iter()
        .map(|t| match &t.tracked {
            Some(tr) if tr.tape.same(&tape) && tr.id < n => {
                grads[tr.id].clone().unwrap_or_else(|| zeros(t))
            }
            _ => zeros(t),
        })
        .collect())
}
