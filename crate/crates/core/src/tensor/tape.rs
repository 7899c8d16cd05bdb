//! Reverse-mode gradient tape over the kernels in [`super::kernels`].
//!
//! A tape records one forward pass and is consumed by a single `backward`
//! call; parameters live outside the tape and are re-leased onto a fresh tape
//! every step. Backward walks the node list once in reverse topological
//! order (node ids are creation-ordered, so parents always precede children)
//! and accumulates gradients in a fixed order.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::kernels as k;
use super::{Tensor, TensorError};

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRowBroadcast(usize, usize),
    SliceCols { parent: usize, start: usize },
    ConcatCols(Vec<usize>),
    SoftmaxRowsMasked(usize, Option<Rc<Vec<bool>>>),
    Relu(usize),
    MeanOverRows(usize),
    MeanValidRows(usize, Rc<Vec<bool>>),
    RowMaskMul(usize, Rc<Vec<bool>>),
    SumAll(usize),
    Sqrt(usize),
    Huber(usize, f64),
    HuberOfArccos(usize, f64),
    DivByScalar(usize, usize),
    MulByScalar(usize, usize),
    Cross3(usize, usize),
    Trace(usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of one forward pass.
pub struct GradientTape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t GradientTape,
    id: usize,
}

impl Default for GradientTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradientTape {
    pub fn new() -> Self {
        GradientTape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Lease a tensor onto the tape (parameter or input; gradients are
    /// computed for every leaf reachable from the loss).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    /// Backpropagate from a scalar loss. Consumes the tape: a second call
    /// returns `TapeConsumed`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        if self.consumed.get() {
            return Err(TensorError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let (lr, lc) = nodes[loss.id].value.shape();
        if (lr, lc) != (1, 1) {
            return Err(TensorError::NonScalarLoss { rows: lr, cols: lc });
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::scalar(1.0));

        // Helper: accumulate `delta` into the gradient slot of `id`.
        fn acc(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, delta: Tensor) {
            debug_assert_eq!(nodes[id].value.shape(), delta.shape());
            match &mut grads[id] {
                Some(g) => {
                    for (gi, di) in g.data_mut().iter_mut().zip(delta.iter()) {
                        *gi += di;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        }

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = k::matmul_nt(&g, &nodes[*b].value)?;
                    let db = k::matmul_tn(&nodes[*a].value, &g)?;
                    acc(&mut grads, &nodes, *a, da);
                    acc(&mut grads, &nodes, *b, db);
                }
                Op::Transpose(a) => {
                    acc(&mut grads, &nodes, *a, k::transpose(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, &nodes, *a, g.clone());
                    acc(&mut grads, &nodes, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &nodes, *a, g.clone());
                    acc(&mut grads, &nodes, *b, k::scale(&g, -1.0));
                }
                Op::Mul(a, b) => {
                    let da = k::mul(&g, &nodes[*b].value)?;
                    let db = k::mul(&g, &nodes[*a].value)?;
                    acc(&mut grads, &nodes, *a, da);
                    acc(&mut grads, &nodes, *b, db);
                }
                Op::Scale(a, c) => {
                    acc(&mut grads, &nodes, *a, k::scale(&g, *c));
                }
                Op::AddRowBroadcast(a, bias) => {
                    let mut db = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        let row = g.row(i);
                        let orow = db.row_mut(0);
                        for j in 0..row.len() {
                            orow[j] += row[j];
                        }
                    }
                    acc(&mut grads, &nodes, *a, g);
                    acc(&mut grads, &nodes, *bias, db);
                }
                Op::SliceCols { parent, start } => {
                    let pv = &nodes[*parent].value;
                    let mut dp = Tensor::zeros(pv.rows(), pv.cols());
                    for i in 0..g.rows() {
                        let src = g.row(i);
                        dp.row_mut(i)[*start..*start + src.len()].copy_from_slice(src);
                    }
                    acc(&mut grads, &nodes, *parent, dp);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = nodes[*p].value.cols();
                        let dp = k::slice_cols(&g, off, w)?;
                        acc(&mut grads, &nodes, *p, dp);
                        off += w;
                    }
                }
                Op::SoftmaxRowsMasked(a, mask) => {
                    let dp = k::softmax_backward(&node.value, &g, mask.as_ref().map(|m| &m[..]));
                    acc(&mut grads, &nodes, *a, dp);
                }
                Op::Relu(a) => {
                    let input = &nodes[*a].value;
                    let mut dp = g;
                    for (d, &x) in dp.data_mut().iter_mut().zip(input.iter()) {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    acc(&mut grads, &nodes, *a, dp);
                }
                Op::MeanOverRows(a) => {
                    let pv = &nodes[*a].value;
                    let inv = 1.0 / pv.rows() as f64;
                    let mut dp = Tensor::zeros(pv.rows(), pv.cols());
                    for i in 0..pv.rows() {
                        for (j, d) in dp.row_mut(i).iter_mut().enumerate() {
                            *d = g.get(0, j) * inv;
                        }
                    }
                    acc(&mut grads, &nodes, *a, dp);
                }
                Op::MeanValidRows(a, mask) => {
                    let pv = &nodes[*a].value;
                    let count = mask.iter().filter(|&&v| v).count();
                    let inv = 1.0 / count as f64;
                    let mut dp = Tensor::zeros(pv.rows(), pv.cols());
                    for i in 0..pv.rows() {
                        if !mask[i] {
                            continue;
                        }
                        for (j, d) in dp.row_mut(i).iter_mut().enumerate() {
                            *d = g.get(0, j) * inv;
                        }
                    }
                    acc(&mut grads, &nodes, *a, dp);
                }
                Op::RowMaskMul(a, mask) => {
                    let dp = k::row_mask_mul(&g, mask)?;
                    acc(&mut grads, &nodes, *a, dp);
                }
                Op::SumAll(a) => {
                    let pv = &nodes[*a].value;
                    let gv = g.item();
                    let dp = Tensor::from_fn(pv.rows(), pv.cols(), |_, _| gv);
                    acc(&mut grads, &nodes, *a, dp);
                }
                Op::Sqrt(a) => {
                    // d sqrt(x) = 0.5 / sqrt(x); reuse the forward output.
                    let mut dp = g;
                    for (d, &s) in dp.data_mut().iter_mut().zip(node.value.iter()) {
                        *d *= 0.5 / s;
                    }
                    acc(&mut grads, &nodes, *a, dp);
                }
                Op::Huber(a, delta) => {
                    let input = &nodes[*a].value;
                    let mut dp = g;
                    for (d, &x) in dp.data_mut().iter_mut().zip(input.iter()) {
                        *d *= k::huber_grad(x, *delta);
                    }
                    acc(&mut grads, &nodes, *a, dp);
                }
                Op::HuberOfArccos(a, delta) => {
                    let input = &nodes[*a].value;
                    let mut dp = g;
                    for (d, &x) in dp.data_mut().iter_mut().zip(input.iter()) {
                        *d *= k::huber_of_arccos_grad(x, *delta);
                    }
                    acc(&mut grads, &nodes, *a, dp);
                }
                Op::DivByScalar(a, s) => {
                    let sv = nodes[*s].value.item();
                    let av = &nodes[*a].value;
                    let da = k::scale(&g, 1.0 / sv);
                    let mut ds = 0.0;
                    for (gi, ai) in g.iter().zip(av.iter()) {
                        ds += gi * ai;
                    }
                    acc(&mut grads, &nodes, *a, da);
                    acc(&mut grads, &nodes, *s, Tensor::scalar(-ds / (sv * sv)));
                }
                Op::MulByScalar(a, s) => {
                    let sv = nodes[*s].value.item();
                    let av = &nodes[*a].value;
                    let da = k::scale(&g, sv);
                    let mut ds = 0.0;
                    for (gi, ai) in g.iter().zip(av.iter()) {
                        ds += gi * ai;
                    }
                    acc(&mut grads, &nodes, *a, da);
                    acc(&mut grads, &nodes, *s, Tensor::scalar(ds));
                }
                Op::Cross3(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let da = k::cross3(bv, &g)?;
                    let db = k::cross3(&g, av)?;
                    acc(&mut grads, &nodes, *a, da);
                    acc(&mut grads, &nodes, *b, db);
                }
                Op::Trace(a) => {
                    let pv = &nodes[*a].value;
                    let gv = g.item();
                    let mut dp = Tensor::zeros(pv.rows(), pv.cols());
                    for i in 0..pv.rows() {
                        dp.set(i, i, gv);
                    }
                    acc(&mut grads, &nodes, *a, dp);
                }
            }
        }

        Ok(Gradients { grads })
    }
}

/// Gradients keyed by tape node id; leaves not reachable from the loss have
/// `None` (treated as zero).
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, materializing zeros for disconnected leaves.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let val = v.value();
                Tensor::zeros(val.rows(), val.cols())
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    /// New leaf on the same tape (convenience for building losses around an
    /// existing variable).
    pub fn tape_leaf(&self, t: &Tensor) -> Var<'t> {
        self.tape.leaf(t.clone())
    }

    pub fn shape(&self) -> (usize, usize) {
        let nodes = self.tape.nodes.borrow();
        nodes[self.id].value.shape()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            k::matmul_nn(&nodes[self.id].value, &nodes[rhs.id].value)?
        };
        Ok(self.tape.push(v, Op::MatMul(self.id, rhs.id)))
    }

    pub fn t(self) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            k::transpose(&nodes[self.id].value)
        };
        self.tape.push(v, Op::Transpose(self.id))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            k::add(&nodes[self.id].value, &nodes[rhs.id].value)?
        };
        Ok(self.tape.push(v, Op::Add(self.id, rhs.id)))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            k::sub(&nodes[self.id].value, &nodes[rhs.id].value)?
        };
        Ok(self.tape.push(v, Op::Sub(self.id, rhs.id)))
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            k::mul(&nodes[self.id].value, &nodes[rhs.id].value)?
        };
        Ok(self.tape.push(v, Op::Mul(self.id, rhs.id)))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            k::scale(&nodes[self.id].value, c)
        };
        self.tape.push(v, Op::Scale(self.id, c))
    }

    pub fn add_row_broadcast(self, bias: Var<'t>) -> Result<Var<'t>, TensorError> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            k::add_row_broadcast(&nodes[self.id].value, &nodes[bias.id].value)?
        };
        Ok(self.tape.push(v, Op::AddRowBroadcast(self.id, bias.id)))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>, TensorError> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            k::slice_cols(&nodes[self.id].value, start, len)?
        };
        Ok(self
            .tape
            .push(v, Op::SliceCols { parent: self.id, start }))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let v = {
            let nodes = tape.nodes.borrow();
            let tensors: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.id].value).collect();
            k::concat_cols(&tensors)?
        };
        Ok(tape.push(v, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    pub fn softmax_rows_masked(
        self,
        mask: Option<Rc<Vec<bool>>>,
    ) -> Result<Var<'t>, TensorError> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            k::softmax_rows_masked(&nodes[self.id].value, mask.as_ref().map(|m| &m[..]))?
        };
        Ok(self.tape.push(v, Op::SoftmaxRowsMasked(self.id, mask)))
    }

    pub fn softmax_rows(self) -> Result<Var<'t>, TensorError> {
        self.softmax_rows_masked(None)
    }

    pub fn relu(self) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            k::relu(&nodes[self.id].value)
        };
        self.tape.push(v, Op::Relu(self.id))
    }

    pub fn mean_over_rows(self) -> Result<Var<'t>, TensorError> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            k::mean_over_rows(&nodes[self.id].value)?
        };
        Ok(self.tape.push(v, Op::MeanOverRows(self.id)))
    }

    pub fn mean_valid_rows(self, mask: Rc<Vec<bool>>) -> Result<Var<'t>, TensorError> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            k::mean_valid_rows(&nodes[self.id].value, &mask)?
        };
        Ok(self.tape.push(v, Op::MeanValidRows(self.id, mask)))
    }

    pub fn row_mask_mul(self, mask: Rc<Vec<bool>>) -> Result<Var<'t>, TensorError> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            k::row_mask_mul(&nodes[self.id].value, &mask)?
        };
        Ok(self.tape.push(v, Op::RowMaskMul(self.id, mask)))
    }

    pub fn sum_all(self) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            k::sum_all(&nodes[self.id].value)
        };
        self.tape.push(v, Op::SumAll(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            k::sqrt_elem(&nodes[self.id].value)
        };
        self.tape.push(v, Op::Sqrt(self.id))
    }

    pub fn huber(self, delta: f64) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            k::huber(&nodes[self.id].value, delta)
        };
        self.tape.push(v, Op::Huber(self.id, delta))
    }

    pub fn huber_of_arccos(self, delta: f64) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            k::huber_of_arccos(&nodes[self.id].value, delta)
        };
        self.tape.push(v, Op::HuberOfArccos(self.id, delta))
    }

    /// Elementwise division by a 1x1 scalar node.
    pub fn div_by_scalar(self, s: Var<'t>) -> Result<Var<'t>, TensorError> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            let sv = &nodes[s.id].value;
            if sv.shape() != (1, 1) {
                return Err(TensorError::ShapeMismatch {
                    op: "div_by_scalar",
                    detail: format!("scalar side has shape {:?}", sv.shape()),
                });
            }
            k::scale(&nodes[self.id].value, 1.0 / sv.item())
        };
        Ok(self.tape.push(v, Op::DivByScalar(self.id, s.id)))
    }

    /// Elementwise multiplication by a 1x1 scalar node.
    pub fn mul_by_scalar(self, s: Var<'t>) -> Result<Var<'t>, TensorError> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            let sv = &nodes[s.id].value;
            if sv.shape() != (1, 1) {
                return Err(TensorError::ShapeMismatch {
                    op: "mul_by_scalar",
                    detail: format!("scalar side has shape {:?}", sv.shape()),
                });
            }
            k::scale(&nodes[self.id].value, sv.item())
        };
        Ok(self.tape.push(v, Op::MulByScalar(self.id, s.id)))
    }

    pub fn cross3(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            k::cross3(&nodes[self.id].value, &nodes[rhs.id].value)?
        };
        Ok(self.tape.push(v, Op::Cross3(self.id, rhs.id)))
    }

    pub fn trace(self) -> Result<Var<'t>, TensorError> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            k::trace(&nodes[self.id].value)?
        };
        Ok(self.tape.push(v, Op::Trace(self.id)))
    }

    /// L2 norm as a 1x1 node: `sqrt(sum(x*x))`.
    pub fn l2_norm(self) -> Result<Var<'t>, TensorError> {
        Ok(self.mul(self)?.sum_all().sqrt())
    }

    /// Dot product of two row vectors as a 1x1 node.
    pub fn dot(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.mul(rhs).map(|v| v.sum_all())
    }
}
