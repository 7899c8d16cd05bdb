//! Execution backends for the forward pass.
//!
//! The same block code runs either on a [`GradientTape`] (training) or on
//! plain reference-counted tensors (inference). Both backends call the same
//! kernels in the same order, so their outputs are bit-identical; the
//! inference backend frees intermediates as soon as the last handle drops,
//! which matters at benchmark keypoint counts.

use std::rc::Rc;

use crate::tensor::{self as k, GradientTape, Tensor, TensorError, Var};

pub trait Exec {
    type V: Clone;

    fn leaf(&self, t: Tensor) -> Self::V;
    fn tensor(&self, v: &Self::V) -> Tensor;

    fn matmul(&self, a: &Self::V, b: &Self::V) -> Result<Self::V, TensorError>;
    fn transpose(&self, a: &Self::V) -> Self::V;
    fn add(&self, a: &Self::V, b: &Self::V) -> Result<Self::V, TensorError>;
    fn mul(&self, a: &Self::V, b: &Self::V) -> Result<Self::V, TensorError>;
    fn scale(&self, a: &Self::V, c: f64) -> Self::V;
    fn add_row_broadcast(&self, a: &Self::V, bias: &Self::V) -> Result<Self::V, TensorError>;
    fn slice_cols(&self, a: &Self::V, start: usize, len: usize) -> Result<Self::V, TensorError>;
    fn concat_cols(&self, parts: &[Self::V]) -> Result<Self::V, TensorError>;
    fn softmax_rows_masked(
        &self,
        a: &Self::V,
        mask: Option<Rc<Vec<bool>>>,
    ) -> Result<Self::V, TensorError>;
    fn relu(&self, a: &Self::V) -> Self::V;
    fn mean_valid_rows(&self, a: &Self::V, mask: Rc<Vec<bool>>) -> Result<Self::V, TensorError>;
    fn row_mask_mul(&self, a: &Self::V, mask: Rc<Vec<bool>>) -> Result<Self::V, TensorError>;
}

/// Training backend: every op is recorded on the tape.
pub struct TapeExec<'t> {
    pub tape: &'t GradientTape,
}

impl<'t> Exec for TapeExec<'t> {
    type V = Var<'t>;

    fn leaf(&self, t: Tensor) -> Var<'t> {
        self.tape.leaf(t)
    }

    fn tensor(&self, v: &Var<'t>) -> Tensor {
        v.value()
    }

    fn matmul(&self, a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>, TensorError> {
        a.matmul(*b)
    }

    fn transpose(&self, a: &Var<'t>) -> Var<'t> {
        a.t()
    }

    fn add(&self, a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>, TensorError> {
        a.add(*b)
    }

    fn mul(&self, a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>, TensorError> {
        a.mul(*b)
    }

    fn scale(&self, a: &Var<'t>, c: f64) -> Var<'t> {
        a.scale(c)
    }

    fn add_row_broadcast(&self, a: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>, TensorError> {
        a.add_row_broadcast(*bias)
    }

    fn slice_cols(&self, a: &Var<'t>, start: usize, len: usize) -> Result<Var<'t>, TensorError> {
        a.slice_cols(start, len)
    }

    fn concat_cols(&self, parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        Var::concat_cols(parts)
    }

    fn softmax_rows_masked(
        &self,
        a: &Var<'t>,
        mask: Option<Rc<Vec<bool>>>,
    ) -> Result<Var<'t>, TensorError> {
        a.softmax_rows_masked(mask)
    }

    fn relu(&self, a: &Var<'t>) -> Var<'t> {
        a.relu()
    }

    fn mean_valid_rows(&self, a: &Var<'t>, mask: Rc<Vec<bool>>) -> Result<Var<'t>, TensorError> {
        a.mean_valid_rows(mask)
    }

    fn row_mask_mul(&self, a: &Var<'t>, mask: Rc<Vec<bool>>) -> Result<Var<'t>, TensorError> {
        a.row_mask_mul(mask)
    }
}

/// Inference backend: values drop as soon as the last `Rc` goes away.
pub struct InferExec;

impl Exec for InferExec {
    type V = Rc<Tensor>;

    fn leaf(&self, t: Tensor) -> Rc<Tensor> {
        Rc::new(t)
    }

    fn tensor(&self, v: &Rc<Tensor>) -> Tensor {
        (**v).clone()
    }

    fn matmul(&self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>, TensorError> {
        k::matmul_nn(a, b).map(Rc::new)
    }

    fn transpose(&self, a: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(k::transpose(a))
    }

    fn add(&self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>, TensorError> {
        k::add(a, b).map(Rc::new)
    }

    fn mul(&self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>, TensorError> {
        k::mul(a, b).map(Rc::new)
    }

    fn scale(&self, a: &Rc<Tensor>, c: f64) -> Rc<Tensor> {
        Rc::new(k::scale(a, c))
    }

    fn add_row_broadcast(
        &self,
        a: &Rc<Tensor>,
        bias: &Rc<Tensor>,
    ) -> Result<Rc<Tensor>, TensorError> {
        k::add_row_broadcast(a, bias).map(Rc::new)
    }

    fn slice_cols(
        &self,
        a: &Rc<Tensor>,
        start: usize,
        len: usize,
    ) -> Result<Rc<Tensor>, TensorError> {
        k::slice_cols(a, start, len).map(Rc::new)
    }

    fn concat_cols(&self, parts: &[Rc<Tensor>]) -> Result<Rc<Tensor>, TensorError> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| &**p).collect();
        k::concat_cols(&refs).map(Rc::new)
    }

    fn softmax_rows_masked(
        &self,
        a: &Rc<Tensor>,
        mask: Option<Rc<Vec<bool>>>,
    ) -> Result<Rc<Tensor>, TensorError> {
        k::softmax_rows_masked(a, mask.as_ref().map(|m| &m[..])).map(Rc::new)
    }

    fn relu(&self, a: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(k::relu(a))
    }

    fn mean_valid_rows(
        &self,
        a: &Rc<Tensor>,
        mask: Rc<Vec<bool>>,
    ) -> Result<Rc<Tensor>, TensorError> {
        k::mean_valid_rows(a, &mask).map(Rc::new)
    }

    fn row_mask_mul(&self, a: &Rc<Tensor>, mask: Rc<Vec<bool>>) -> Result<Rc<Tensor>, TensorError> {
        k::row_mask_mul(a, &mask).map(Rc::new)
    }
}
