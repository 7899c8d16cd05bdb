//! Pure numeric kernels shared by the gradient tape and the no-grad
//! inference path. Each kernel uses one fixed accumulation order so results
//! are reproducible bit-for-bit.

use super::{Tensor, TensorError};

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

/// `A (m x k) * B (k x n)`, accumulated i-k-j so each `C` row is built by
/// axpy over `B` rows.
pub fn matmul_nn(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.cols() != b.rows() {
        return Err(shape_err(
            "matmul",
            format!("{:?} * {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut c = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let crow = c.row_mut(i);
        for (p, &aip) in arow.iter().enumerate().take(k) {
            let brow = b.row(p);
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    Ok(c)
}

/// `A (m x k) * B^T` where `B` is `n x k`: rows of `A` dotted with rows of `B`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.cols() != b.cols() {
        return Err(shape_err(
            "matmul_nt",
            format!("{:?} * {:?}^T", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut c = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let crow = c.row_mut(i);
        for j in 0..n {
            let brow = b.row(j);
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            crow[j] = acc;
        }
    }
    Ok(c)
}

/// `A^T (k x m)^T * B (k x n)` where `A` is `k x m`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.rows() != b.rows() {
        return Err(shape_err(
            "matmul_tn",
            format!("{:?}^T * {:?}", a.shape(), b.shape()),
        ));
    }
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let mut c = Tensor::zeros(m, n);
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &api) in arow.iter().enumerate().take(m) {
            let crow = c.row_mut(i);
            for j in 0..n {
                crow[j] += api * brow[j];
            }
        }
    }
    Ok(c)
}

pub fn transpose(a: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.cols(), a.rows());
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            out.set(j, i, a.get(i, j));
        }
    }
    out
}

fn zip_elementwise(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, TensorError> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_vec(a.rows(), a.cols(), data))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    zip_elementwise("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    zip_elementwise("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    zip_elementwise("mul", a, b, |x, y| x * y)
}

pub fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(a.rows(), a.cols(), a.iter().map(|&x| f(x)).collect())
}

pub fn scale(a: &Tensor, k: f64) -> Tensor {
    map(a, |x| k * x)
}

pub fn relu(a: &Tensor) -> Tensor {
    map(a, |x| if x > 0.0 { x } else { 0.0 })
}

/// `out[i][j] = a[i][j] + bias[0][j]`.
pub fn add_row_broadcast(a: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
    if bias.rows() != 1 || bias.cols() != a.cols() {
        return Err(shape_err(
            "add_row_broadcast",
            format!("{:?} + bias {:?}", a.shape(), bias.shape()),
        ));
    }
    let mut out = a.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        for (j, &bj) in bias.row(0).iter().enumerate() {
            row[j] += bj;
        }
    }
    Ok(out)
}

pub fn slice_cols(a: &Tensor, start: usize, len: usize) -> Result<Tensor, TensorError> {
    if start + len > a.cols() {
        return Err(shape_err(
            "slice_cols",
            format!("[{start}..{}] of {:?}", start + len, a.shape()),
        ));
    }
    let mut out = Tensor::zeros(a.rows(), len);
    for i in 0..a.rows() {
        out.row_mut(i).copy_from_slice(&a.row(i)[start..start + len]);
    }
    Ok(out)
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
    if parts.is_empty() {
        return Err(TensorError::EmptyInput("concat_cols"));
    }
    let rows = parts[0].rows();
    if parts.iter().any(|p| p.rows() != rows) {
        return Err(shape_err("concat_cols", "row counts differ".into()));
    }
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Tensor::zeros(rows, cols);
    for i in 0..rows {
        let mut off = 0;
        let row = out.row_mut(i);
        for p in parts {
            row[off..off + p.cols()].copy_from_slice(p.row(i));
            off += p.cols();
        }
    }
    Ok(out)
}

/// Row-wise softmax with optional column mask. Masked columns get exactly
/// zero probability and are skipped in the max/sum reductions, so appending
/// masked columns leaves valid outputs bit-identical.
pub fn softmax_rows_masked(
    a: &Tensor,
    mask: Option<&[bool]>,
) -> Result<Tensor, TensorError> {
    if let Some(m) = mask {
        if m.len() != a.cols() {
            return Err(shape_err(
                "softmax_rows_masked",
                format!("mask len {} vs cols {}", m.len(), a.cols()),
            ));
        }
        if !m.iter().any(|&v| v) {
            return Err(TensorError::AllRowsMasked);
        }
    }
    let valid = |j: usize| mask.map_or(true, |m| m[j]);
    let mut out = Tensor::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let row = a.row(i);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if valid(j) && v > max {
                max = v;
            }
        }
        let orow = out.row_mut(i);
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if valid(j) {
                let e = (v - max).exp();
                orow[j] = e;
                sum += e;
            }
        }
        for (j, o) in orow.iter_mut().enumerate() {
            if valid(j) {
                *o /= sum;
            }
        }
    }
    Ok(out)
}

/// Backward of [`softmax_rows_masked`] given the forward probabilities.
pub fn softmax_backward(probs: &Tensor, grad: &Tensor, mask: Option<&[bool]>) -> Tensor {
    let valid = |j: usize| mask.map_or(true, |m| m[j]);
    let mut out = Tensor::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let g = grad.row(i);
        let mut dot = 0.0;
        for j in 0..p.len() {
            if valid(j) {
                dot += p[j] * g[j];
            }
        }
        let orow = out.row_mut(i);
        for j in 0..p.len() {
            if valid(j) {
                orow[j] = p[j] * (g[j] - dot);
            }
        }
    }
    out
}

/// Mean over all rows: `N x d -> 1 x d`.
pub fn mean_over_rows(a: &Tensor) -> Result<Tensor, TensorError> {
    if a.rows() == 0 {
        return Err(TensorError::EmptyInput("mean_over_rows"));
    }
    let mut out = Tensor::zeros(1, a.cols());
    for i in 0..a.rows() {
        let row = a.row(i);
        let orow = out.row_mut(0);
        for j in 0..a.cols() {
            orow[j] += row[j];
        }
    }
    let inv = 1.0 / a.rows() as f64;
    for v in out.data_mut() {
        *v *= inv;
    }
    Ok(out)
}

/// Mean over rows flagged valid; rows are visited in index order.
pub fn mean_valid_rows(a: &Tensor, row_mask: &[bool]) -> Result<Tensor, TensorError> {
    if row_mask.len() != a.rows() {
        return Err(shape_err(
            "mean_valid_rows",
            format!("mask len {} vs rows {}", row_mask.len(), a.rows()),
        ));
    }
    let count = row_mask.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(TensorError::EmptyInput("mean_valid_rows"));
    }
    let mut out = Tensor::zeros(1, a.cols());
    for i in 0..a.rows() {
        if !row_mask[i] {
            continue;
        }
        let row = a.row(i);
        let orow = out.row_mut(0);
        for j in 0..a.cols() {
            orow[j] += row[j];
        }
    }
    let inv = 1.0 / count as f64;
    for v in out.data_mut() {
        *v *= inv;
    }
    Ok(out)
}

/// Zero out rows where the mask is false.
pub fn row_mask_mul(a: &Tensor, row_mask: &[bool]) -> Result<Tensor, TensorError> {
    if row_mask.len() != a.rows() {
        return Err(shape_err(
            "row_mask_mul",
            format!("mask len {} vs rows {}", row_mask.len(), a.rows()),
        ));
    }
    let mut out = a.clone();
    for (i, &keep) in row_mask.iter().enumerate() {
        if !keep {
            out.row_mut(i).fill(0.0);
        }
    }
    Ok(out)
}

pub fn sum_all(a: &Tensor) -> Tensor {
    let mut acc = 0.0;
    for &v in a.iter() {
        acc += v;
    }
    Tensor::scalar(acc)
}

/// Huber value elementwise: `x^2/2` inside `|x| <= delta`, else
/// `delta (|x| - delta/2)`.
pub fn huber(a: &Tensor, delta: f64) -> Tensor {
    map(a, |x| {
        if x.abs() <= delta {
            0.5 * x * x
        } else {
            delta * (x.abs() - 0.5 * delta)
        }
    })
}

pub fn huber_grad(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        x
    } else {
        delta * x.signum()
    }
}

/// Fused `Huber(arccos(clamp(x, -1, 1)))` elementwise, with the gradient
/// `-min(theta, delta) / sin(theta)` evaluated through its finite limit -1
/// as theta -> 0. Near theta = pi the true derivative diverges; it is capped
/// at 1e8 in magnitude.
pub fn huber_of_arccos(a: &Tensor, delta: f64) -> Tensor {
    map(a, |x| {
        let theta = x.clamp(-1.0, 1.0).acos();
        if theta <= delta {
            0.5 * theta * theta
        } else {
            delta * (theta - 0.5 * delta)
        }
    })
}

pub fn huber_of_arccos_grad(x: f64, delta: f64) -> f64 {
    let c = x.clamp(-1.0, 1.0);
    let theta = c.acos();
    let s = theta.sin();
    if theta < 1e-6 {
        // -theta/sin(theta) -> -1
        return -1.0;
    }
    let h = theta.min(delta);
    if s < 1e-8 {
        return (-h / 1e-8).max(-1e8);
    }
    -h / s
}

/// Elementwise square root; inputs must be positive (guarded by callers).
pub fn sqrt_elem(a: &Tensor) -> Tensor {
    map(a, f64::sqrt)
}

/// Cross product of two 1x3 row vectors.
pub fn cross3(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape() != (1, 3) || b.shape() != (1, 3) {
        return Err(shape_err(
            "cross3",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (a, b) = (a.row(0), b.row(0));
    Ok(Tensor::row_vector(&[
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]))
}

/// Trace of a square matrix as a 1x1 tensor.
pub fn trace(a: &Tensor) -> Result<Tensor, TensorError> {
    if a.rows() != a.cols() {
        return Err(shape_err("trace", format!("{:?}", a.shape())));
    }
    let mut acc = 0.0;
    for i in 0..a.rows() {
        acc += a.get(i, i);
    }
    Ok(Tensor::scalar(acc))
}
