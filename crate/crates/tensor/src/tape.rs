//! Gradient tape and the tape-aware [`Tensor`] handle.
//!
//! Forward values are computed eagerly. Every operation with at least one tracked
//! input appends a node to that input's tape. [`grad`] walks the tape backwards and
//! expresses every vector-Jacobian product with the same recorded operations, so with
//! `create_graph` the returned gradients are themselves tracked and can be
//! differentiated again.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::data::TensorData;
use crate::error::{Result, TensorError};
use crate::ops::{vjp, Op};
use crate::scalar::Scalar;

pub(crate) struct Node<T> {
    pub op: Op<T>,
    pub inputs: Vec<usize>,
    pub value: TensorData<T>,
    pub generation: u32,
}

struct TapeInner<T> {
    nodes: Vec<Node<T>>,
    generation: u32,
    closed: bool,
}

/// Append-only operation record. Cloning yields another handle to the same tape.
///
/// A tape is confined to the thread that created it; independent tapes can live on
/// different threads.
pub struct Tape<T = f64> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("nodes", &inner.nodes.len())
            .field("generation", &inner.generation)
            .field("closed", &inner.closed)
            .finish()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                generation: 0,
                closed: false,
            })),
        }
    }

    /// Registers a differentiable leaf.
    pub fn var(&self, data: TensorData<T>) -> Result<Tensor<T>> {
        let id = self.push(Op::Leaf, Vec::new(), data.clone(), "var")?;
        Ok(Tensor {
            data,
            link: Some(Link {
                tape: self.clone(),
                id,
            }),
        })
    }

    /// Stops further recording. Already recorded nodes stay usable for `grad`
    /// without `create_graph`.
    pub fn close(&self) {
        self.inner.borrow_mut().closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.inner.borrow().closed
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Current nesting depth of gradient recording (0 outside any backward pass).
    pub fn generation(&self) -> u32 {
        self.inner.borrow().generation
    }

    pub fn node_generation(&self, id: usize) -> Option<u32> {
        self.inner.borrow().nodes.get(id).map(|n| n.generation)
    }

    pub fn same_as(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push(
        &self,
        op: Op<T>,
        inputs: Vec<usize>,
        value: TensorData<T>,
        name: &'static str,
    ) -> Result<usize> {
        let mut inner = self.inner.borrow_mut();
        if inner.closed {
            return Err(TensorError::TapeClosed { op: name });
        }
        let generation = inner.generation;
        inner.nodes.push(Node {
            op,
            inputs,
            value,
            generation,
        });
        Ok(inner.nodes.len() - 1)
    }
}

#[derive(Clone)]
struct Link<T> {
    tape: Tape<T>,
    id: usize,
}

/// A value that is either plain data or a node on a [`Tape`].
#[derive(Clone)]
pub struct Tensor<T = f64> {
    data: TensorData<T>,
    link: Option<Link<T>>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("node", &self.link.as_ref().map(|l| l.id))
            .finish()
    }
}

impl<T: Scalar> From<TensorData<T>> for Tensor<T> {
    fn from(data: TensorData<T>) -> Self {
        Self { data, link: None }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], values: Vec<T>) -> Result<Self> {
        Ok(TensorData::new(shape, values)?.into())
    }

    pub fn scalar(value: T) -> Self {
        TensorData::scalar(value).into()
    }

    pub fn zeros(shape: &[usize]) -> Self {
        TensorData::zeros(shape).into()
    }

    pub fn data(&self) -> &TensorData<T> {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn values(&self) -> &[T] {
        self.data.as_slice()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.values()[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.link.is_some()
    }

    pub fn tape(&self) -> Option<&Tape<T>> {
        self.link.as_ref().map(|l| &l.tape)
    }

    pub fn node_id(&self) -> Option<usize> {
        self.link.as_ref().map(|l| l.id)
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Self {
        self.data.clone().into()
    }

    pub(crate) fn record(
        name: &'static str,
        op: Op<T>,
        inputs: &[&Tensor<T>],
        value: TensorData<T>,
    ) -> Result<Self> {
        let mut tape: Option<&Tape<T>> = None;
        for input in inputs {
            if let Some(link) = &input.link {
                match tape {
                    None => tape = Some(&link.tape),
                    Some(t) if !t.same_as(&link.tape) => {
                        return Err(TensorError::DifferentTapes { op: name })
                    }
                    Some(_) => {}
                }
            }
        }
        let Some(tape) = tape else {
            return Ok(value.into());
        };
        if tape.is_closed() {
            return Err(TensorError::TapeClosed { op: name });
        }
        let mut ids = Vec::with_capacity(inputs.len());
        for input in inputs {
            let id = match &input.link {
                Some(link) => link.id,
                None => tape.push(Op::Constant, Vec::new(), input.data.clone(), name)?,
            };
            ids.push(id);
        }
        let id = tape.push(op, ids, value.clone(), name)?;
        Ok(Self {
            data: value,
            link: Some(Link {
                tape: tape.clone(),
                id,
            }),
        })
    }
}

/// Restores the tape generation when a recording backward pass ends, even on error.
struct GenerationGuard<'a, T> {
    tape: &'a Tape<T>,
    previous: u32,
}

impl<T> Drop for GenerationGuard<'_, T> {
    fn drop(&mut self) {
        self.tape.inner.borrow_mut().generation = self.previous;
    }
}

/// Gradients of the scalar `output` with respect to each tensor in `wrt`.
///
/// Only nodes that lie on a path from some `wrt` tensor to `output` are visited, and
/// only the input slots leading back to a `wrt` tensor get a vector-Jacobian product.
/// Asking for a subset of parameters therefore skips the work below the earliest one.
///
/// With `create_graph` the backward computation is itself recorded on the tape, so
/// the returned gradients can be differentiated again. Without it the results are
/// plain data.
///
/// A `wrt` tensor the output does not depend on gets a zero gradient.
pub fn grad<T: Scalar>(
    output: &Tensor<T>,
    wrt: &[&Tensor<T>],
    create_graph: bool,
) -> Result<Vec<Tensor<T>>> {
    if output.numel() != 1 {
        return Err(TensorError::NotScalar {
            shape: output.shape().to_vec(),
        });
    }
    let out_link = match &output.link {
        Some(link) => link,
        None if wrt.is_empty() => return Ok(Vec::new()),
        None => return Err(TensorError::NotOnTape { index: 0 }),
    };
    let tape = &out_link.tape;
    let out_id = out_link.id;

    let mut wrt_ids = Vec::with_capacity(wrt.len());
    for (index, t) in wrt.iter().enumerate() {
        match &t.link {
            Some(link) if link.tape.same_as(tape) => wrt_ids.push(link.id),
            _ => return Err(TensorError::NotOnTape { index }),
        }
    }

    let active = {
        let inner = tape.inner.borrow();
        let nodes = &inner.nodes[..=out_id];
        let mut depends = vec![false; nodes.len()];
        for &id in &wrt_ids {
            if id <= out_id {
                depends[id] = true;
            }
        }
        for (id, node) in nodes.iter().enumerate() {
            if !depends[id] && node.inputs.iter().any(|&i| depends[i]) {
                depends[id] = true;
            }
        }
        let mut reaches = vec![false; nodes.len()];
        reaches[out_id] = true;
        for id in (0..=out_id).rev() {
            if reaches[id] {
                for &i in &nodes[id].inputs {
                    reaches[i] = true;
                }
            }
        }
        depends
            .iter()
            .zip(reaches.iter())
            .map(|(&d, &r)| d && r)
            .collect::<Vec<_>>()
    };

    let _guard = if create_graph {
        let mut inner = tape.inner.borrow_mut();
        let previous = inner.generation;
        inner.generation += 1;
        Some(GenerationGuard { tape, previous })
    } else {
        None
    };

    let handle = |id: usize, value: TensorData<T>| -> Tensor<T> {
        Tensor {
            data: value,
            link: create_graph.then(|| Link {
                tape: tape.clone(),
                id,
            }),
        }
    };

    let mut grads: Vec<Option<Tensor<T>>> = vec![None; out_id + 1];
    grads[out_id] = Some(TensorData::filled(output.shape(), T::one()).into());

    for id in (0..=out_id).rev() {
        if !active[id] {
            continue;
        }
        let Some(g) = grads[id].take() else { continue };
        let (op, input_ids, inputs, out) = {
            let inner = tape.inner.borrow();
            let node = &inner.nodes[id];
            if node.inputs.is_empty() {
                grads[id] = Some(g);
                continue;
            }
            let inputs: Vec<Tensor<T>> = node
                .inputs
                .iter()
                .map(|&i| handle(i, inner.nodes[i].value.clone()))
                .collect();
            (
                node.op.clone(),
                node.inputs.clone(),
                inputs,
                handle(id, node.value.clone()),
            )
        };
        for (slot, &input_id) in input_ids.iter().enumerate() {
            if !active[input_id] {
                continue;
            }
            let contribution = vjp(&op, slot, &g, &inputs, &out)?;
            grads[input_id] = Some(match grads[input_id].take() {
                None => contribution,
                Some(prev) => prev.add(&contribution)?,
            });
        }
        // keep wrt gradients that are also interior nodes
        if wrt_ids.contains(&id) {
            grads[id] = Some(g);
        }
    }

    Ok(wrt
        .iter()
        .zip(wrt_ids.iter())
        .map(|(t, &id)| {
            grads
                .get(id)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| TensorData::zeros(t.shape()).into())
        })
        .collect())
}
