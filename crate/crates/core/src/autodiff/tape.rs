use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use super::kernels;
use crate::error::{Error, Result};

/// Primitive operation recorded on a [`Tape`].
///
/// Every backward rule is written in terms of these same primitives, so a
/// gradient computed with `create_graph = true` is itself differentiable.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    MatMul { trans_a: bool, trans_b: bool },
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Exp,
    Reciprocal,
    Sqrt,
    /// Summation down to a broadcast-compatible shape (`[]` sums everything).
    SumTo(Vec<usize>),
    BroadcastTo(Vec<usize>),
    Reshape(Vec<usize>),
    MaxLastAxis,
    Gather(Rc<[usize]>),
    SelectRows(Rc<[usize]>),
    ScatterRows { index: Rc<[usize]>, rows: usize },
    L2NormSq,
    LogSumExp,
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Rc<ArrayD<f64>>,
    requires_grad: bool,
    serial: u64,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    next_serial: u64,
}

/// Append-only record of primitive operations.
///
/// A tape and its tensors are `!Send`: one thread owns a tape at a time.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
    serial: u64,
    value: Rc<ArrayD<f64>>,
    requires_grad: bool,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

/// Gradients returned by [`Tape::grad`], one entry per requested tensor, in
/// request order.
#[derive(Clone, Debug)]
pub struct GradientMap {
    grads: Vec<Tensor>,
    created_as_graph: bool,
}

impl GradientMap {
    pub fn get(&self, i: usize) -> &Tensor {
        &self.grads[i]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }

    /// Whether the entries are differentiable graph nodes.
    pub fn created_as_graph(&self) -> bool {
        self.created_as_graph
    }

    pub fn into_values(self) -> Vec<ArrayD<f64>> {
        self.grads.into_iter().map(|g| g.value().clone()).collect()
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.grads
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Whether both handles refer to the same tape.
    pub fn same_as(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. `requires_grad` marks it as a differentiation target.
    pub fn leaf(&self, value: ArrayD<f64>, requires_grad: bool) -> Tensor {
        self.push_node(Op::Leaf, Vec::new(), value, requires_grad)
    }

    pub fn constant(&self, value: ArrayD<f64>) -> Tensor {
        self.leaf(value, false)
    }

    pub fn var(&self, value: ArrayD<f64>) -> Tensor {
        self.leaf(value, true)
    }

    pub fn scalar(&self, value: f64) -> Tensor {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    fn push_node(&self, op: Op, inputs: Vec<usize>, value: ArrayD<f64>, requires_grad: bool) -> Tensor {
        let value = Rc::new(value);
        let mut inner = self.inner.borrow_mut();
        let serial = inner.next_serial;
        inner.next_serial += 1;
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            inputs,
            value: Rc::clone(&value),
            requires_grad,
            serial,
        });
        Tensor {
            tape: self.clone(),
            id,
            serial,
            value,
            requires_grad,
        }
    }

    fn check(&self, t: &Tensor) -> Result<()> {
        if !Rc::ptr_eq(&self.inner, &t.tape.inner) {
            return Err(Error::ForeignTensor);
        }
        let inner = self.inner.borrow();
        match inner.nodes.get(t.id) {
            Some(node) if node.serial == t.serial => Ok(()),
            _ => Err(Error::StaleTensor { node: t.id }),
        }
    }

    pub(crate) fn record(&self, op: Op, operands: &[&Tensor]) -> Result<Tensor> {
        for t in operands {
            self.check(t)?;
        }
        let values: Vec<&ArrayD<f64>> = operands.iter().map(|t| t.value.as_ref()).collect();
        let value = compute(&op, &values)?;
        let requires_grad = operands.iter().any(|t| t.requires_grad);
        Ok(self.push_node(op, operands.iter().map(|t| t.id).collect(), value, requires_grad))
    }

    fn truncate(&self, len: usize) {
        self.inner.borrow_mut().nodes.truncate(len);
    }

    /// Recomputes every non-leaf node from its recorded operands and checks
    /// that the cached value is reproduced bit for bit. Returns the id of the
    /// first mismatching node, if any.
    pub fn replay_mismatch(&self) -> Option<usize> {
        let inner = self.inner.borrow();
        for (id, node) in inner.nodes.iter().enumerate() {
            if node.op == Op::Leaf {
                continue;
            }
            let values: Vec<&ArrayD<f64>> = node.inputs.iter().map(|&i| inner.nodes[i].value.as_ref()).collect();
            let same = match compute(&node.op, &values) {
                Ok(v) => {
                    v.shape() == node.value.shape()
                        && v.iter().zip(node.value.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
                }
                Err(_) => false,
            };
            if !same {
                return Some(id);
            }
        }
        None
    }

    /// Reverse-mode gradient of the scalar `output` with respect to `wrt`.
    ///
    /// With `create_graph` the backward pass is recorded on this tape and the
    /// returned gradients can be differentiated again. Without it the
    /// backward nodes are discarded and the gradients come back as constant
    /// leaves; the values are identical in both modes. Tensors that `output`
    /// does not depend on receive zero gradients.
    pub fn grad(&self, output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<GradientMap> {
        self.check(output)?;
        for t in wrt {
            self.check(t)?;
        }
        if output.value.len() != 1 {
            return Err(Error::NonScalarOutput {
                shape: output.shape().to_vec(),
            });
        }
        let mark = self.len();
        let grads = self.backward(output, wrt);
        let grads = match grads {
            Ok(g) => g,
            Err(e) => {
                if !create_graph {
                    self.truncate(mark);
                }
                return Err(e);
            }
        };
        if create_graph {
            return Ok(GradientMap {
                grads,
                created_as_graph: true,
            });
        }
        let values: Vec<ArrayD<f64>> = grads.into_iter().map(|g| g.value.as_ref().clone()).collect();
        drop(self.inner.borrow_mut().nodes.drain(mark..));
        let grads = values.into_iter().map(|v| self.constant(v)).collect();
        Ok(GradientMap {
            grads,
            created_as_graph: false,
        })
    }

    fn backward(&self, output: &Tensor, wrt: &[&Tensor]) -> Result<Vec<Tensor>> {
        let zeros = |t: &Tensor| self.constant(ArrayD::zeros(IxDyn(t.shape())));
        let Some(start) = wrt.iter().map(|t| t.id).min() else {
            return Ok(Vec::new());
        };
        if output.id < start {
            return Ok(wrt.iter().map(|t| zeros(t)).collect());
        }
        let targets: HashSet<usize> = wrt.iter().map(|t| t.id).collect();
        let span = output.id - start + 1;

        // A node needs an adjoint only if it lies on a path from a target.
        let mut reach = vec![false; span];
        {
            let inner = self.inner.borrow();
            for id in start..=output.id {
                reach[id - start] = targets.contains(&id)
                    || inner.nodes[id]
                        .inputs
                        .iter()
                        .any(|&i| i >= start && reach[i - start]);
            }
        }

        let mut adjoint: Vec<Option<Tensor>> = vec![None; span];
        if reach[span - 1] {
            adjoint[span - 1] = Some(self.constant(ArrayD::ones(IxDyn(output.shape()))));
        }
        for id in (start..=output.id).rev() {
            let Some(g) = adjoint[id - start].clone() else {
                continue;
            };
            let (op, inputs) = {
                let inner = self.inner.borrow();
                let node = &inner.nodes[id];
                (node.op.clone(), node.inputs.clone())
            };
            if op == Op::Leaf {
                continue;
            }
            let out = self.handle(id);
            let operands: Vec<Tensor> = inputs.iter().map(|&i| self.handle(i)).collect();
            for (slot, &input) in inputs.iter().enumerate() {
                if input < start || !reach[input - start] {
                    continue;
                }
                let contribution = vjp(self, &op, slot, &operands, &out, &g)?;
                let entry = &mut adjoint[input - start];
                *entry = Some(match entry.take() {
                    Some(acc) => acc.add(&contribution)?,
                    None => contribution,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|t| adjoint[t.id - start].clone().unwrap_or_else(|| zeros(t)))
            .collect())
    }

    fn handle(&self, id: usize) -> Tensor {
        let inner = self.inner.borrow();
        let node = &inner.nodes[id];
        Tensor {
            tape: self.clone(),
            id,
            serial: node.serial,
            value: Rc::clone(&node.value),
            requires_grad: node.requires_grad,
        }
    }
}

fn compute(op: &Op, v: &[&ArrayD<f64>]) -> Result<ArrayD<f64>> {
    Ok(match op {
        Op::Leaf => unreachable!("leaves are not recomputed"),
        Op::MatMul { trans_a, trans_b } => kernels::matmul(v[0], v[1], *trans_a, *trans_b)?,
        Op::Add => {
            kernels::same_shape("add", v[0], v[1])?;
            v[0] + v[1]
        }
        Op::Sub => {
            kernels::same_shape("sub", v[0], v[1])?;
            v[0] - v[1]
        }
        Op::Mul => {
            kernels::same_shape("mul", v[0], v[1])?;
            v[0] * v[1]
        }
        Op::Scale(s) => v[0].mapv(|x| x * s),
        Op::Relu => v[0].mapv(|x| if x > 0.0 { x } else { 0.0 }),
        Op::Exp => v[0].mapv(f64::exp),
        Op::Reciprocal => {
            if let Some((index, _)) = v[0].iter().enumerate().find(|(_, &x)| x == 0.0) {
                return Err(Error::Domain {
                    op: "reciprocal",
                    index,
                    value: 0.0,
                });
            }
            v[0].mapv(|x| 1.0 / x)
        }
        Op::Sqrt => {
            if let Some((index, &value)) = v[0].iter().enumerate().find(|(_, &x)| x < 0.0 || x.is_nan()) {
                return Err(Error::Domain { op: "sqrt", index, value });
            }
            v[0].mapv(f64::sqrt)
        }
        Op::SumTo(shape) => kernels::sum_to(v[0], shape)?,
        Op::BroadcastTo(shape) => kernels::broadcast_to(v[0], shape)?,
        Op::Reshape(shape) => kernels::reshape(v[0], shape)?,
        Op::MaxLastAxis => kernels::reduce_last_axis("max", v[0], |row| row[kernels::argmax(row)])?,
        Op::Gather(index) => kernels::gather(v[0], index)?,
        Op::SelectRows(index) => kernels::select_rows(v[0], index)?,
        Op::ScatterRows { index, rows } => kernels::scatter_rows(v[0], index, *rows)?,
        Op::L2NormSq => kernels::reduce_last_axis("l2_norm_sq", v[0], kernels::l2_norm_sq)?,
        Op::LogSumExp => kernels::reduce_last_axis("log_sum_exp", v[0], kernels::log_sum_exp)?,
    })
}

/// Spreads a per-row quantity (leading shape) across the last axis of `shape`.
fn spread_rows(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let mut keep = g.shape().to_vec();
    keep.push(1);
    g.reshape(&keep)?.broadcast_to(shape)
}

/// Vector-Jacobian product for operand `slot` of `op`, built from primitives.
fn vjp(tape: &Tape, op: &Op, slot: usize, x: &[Tensor], out: &Tensor, g: &Tensor) -> Result<Tensor> {
    match op {
        Op::Leaf => unreachable!(),
        Op::MatMul { trans_a, trans_b } => {
            let (a, b) = (&x[0], &x[1]);
            match (slot, *trans_a, *trans_b) {
                (0, false, tb) => g.matmul_t(b, false, !tb),
                (0, true, tb) => b.matmul_t(g, tb, true),
                (_, ta, false) => a.matmul_t(g, !ta, false),
                (_, ta, true) => g.matmul_t(a, true, ta),
            }
        }
        Op::Add => Ok(g.clone()),
        Op::Sub => {
            if slot == 0 {
                Ok(g.clone())
            } else {
                g.scale(-1.0)
            }
        }
        Op::Mul => g.mul(&x[1 - slot]),
        Op::Scale(s) => g.scale(*s),
        Op::Relu => {
            let mask = tape.constant(x[0].value().mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
            g.mul(&mask)
        }
        Op::Exp => g.mul(out),
        Op::Reciprocal => g.mul(&out.mul(out)?)?.scale(-1.0),
        Op::Sqrt => g.mul(&out.reciprocal()?)?.scale(0.5),
        Op::SumTo(_) => g.broadcast_to(x[0].shape()),
        Op::BroadcastTo(_) => g.sum_to(x[0].shape()),
        Op::Reshape(_) => g.reshape(x[0].shape()),
        Op::MaxLastAxis => {
            let idx: Vec<usize> = row_argmax(x[0].value());
            let mask = tape.constant(kernels::one_hot(x[0].shape(), &idx));
            spread_rows(g, x[0].shape())?.mul(&mask)
        }
        Op::Gather(index) => {
            let mask = tape.constant(kernels::one_hot(x[0].shape(), index));
            spread_rows(g, x[0].shape())?.mul(&mask)
        }
        Op::SelectRows(index) => g.scatter_rows(index, x[0].shape()[0]),
        Op::ScatterRows { index, .. } => g.select_rows(index),
        Op::L2NormSq => spread_rows(g, x[0].shape())?.mul(&x[0])?.scale(2.0),
        Op::LogSumExp => {
            let shifted = x[0].sub(&spread_rows(out, x[0].shape())?)?;
            spread_rows(g, x[0].shape())?.mul(&shifted.exp()?)
        }
    }
}

fn row_argmax(a: &ArrayD<f64>) -> Vec<usize> {
    let k = *a.shape().last().unwrap();
    let standard = a.as_standard_layout();
    standard.as_slice().unwrap().chunks(k).map(kernels::argmax).collect()
}

impl Tensor {
    pub fn value(&self) -> &ArrayD<f64> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.value.len(), 1, "item() on tensor of shape {:?}", self.shape());
        *self.value.iter().next().unwrap()
    }

    /// Value-equal constant leaf; no gradient flows back through it.
    pub fn detach(&self) -> Tensor {
        self.tape.constant(self.value.as_ref().clone())
    }

    fn unary(&self, op: Op) -> Result<Tensor> {
        self.tape.record(op, &[self])
    }

    fn binary(&self, other: &Tensor, op: Op) -> Result<Tensor> {
        if !self.tape.same_as(&other.tape) {
            return Err(Error::ForeignTensor);
        }
        self.tape.record(op, &[self, other])
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` where `op` optionally transposes.
    pub fn matmul_t(&self, other: &Tensor, trans_a: bool, trans_b: bool) -> Result<Tensor> {
        self.binary(other, Op::MatMul { trans_a, trans_b })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Mul)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        self.unary(Op::Scale(s))
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary(Op::Relu)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary(Op::Exp)
    }

    pub fn reciprocal(&self) -> Result<Tensor> {
        self.unary(Op::Reciprocal)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary(Op::Sqrt)
    }

    pub fn sum(&self) -> Result<Tensor> {
        self.unary(Op::SumTo(Vec::new()))
    }

    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        self.unary(Op::SumTo(shape.to_vec()))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if !kernels::broadcastable(self.shape(), shape) {
            return Err(Error::shape("broadcast_to", self.shape(), shape));
        }
        self.unary(Op::BroadcastTo(shape.to_vec()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        self.unary(Op::Reshape(shape.to_vec()))
    }

    /// Maximum along the last axis.
    pub fn max_last(&self) -> Result<Tensor> {
        self.unary(Op::MaxLastAxis)
    }

    /// Picks `index[r]` from the last axis of each row `r`.
    pub fn gather(&self, index: &[usize]) -> Result<Tensor> {
        self.unary(Op::Gather(index.into()))
    }

    pub fn select_rows(&self, index: &[usize]) -> Result<Tensor> {
        self.unary(Op::SelectRows(index.into()))
    }

    /// Places row `i` of `self` at row `index[i]` of a zero tensor with
    /// `rows` rows, summing duplicates.
    pub fn scatter_rows(&self, index: &[usize], rows: usize) -> Result<Tensor> {
        self.unary(Op::ScatterRows {
            index: index.into(),
            rows,
        })
    }

    /// Squared Euclidean norm along the last axis.
    pub fn l2_norm_sq(&self) -> Result<Tensor> {
        self.unary(Op::L2NormSq)
    }

    /// Stable `log Σ exp` along the last axis.
    pub fn log_sum_exp(&self) -> Result<Tensor> {
        self.unary(Op::LogSumExp)
    }

    /// Adds `other` after broadcasting it to this tensor's shape.
    pub fn add_broadcast(&self, other: &Tensor) -> Result<Tensor> {
        self.add(&other.broadcast_to(self.shape())?)
    }

    /// Multiplies each row by the matching entry of a per-row tensor.
    pub fn mul_rows(&self, per_row: &Tensor) -> Result<Tensor> {
        self.mul(&spread_rows(per_row, self.shape())?)
    }
}
