//! Helpers over the primitive op set. Elementwise binary ops allow a scalar
//! operand; everything else requires exact shapes. Infallible wrappers panic
//! only on shape bugs, which the callers treat as programmer error.

use super::tape::{record, OpKind};
use super::tensor::Tensor;
use super::AdResult;

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    record(OpKind::Add, &[a, b]).expect("add: shape mismatch")
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    record(OpKind::Mul, &[a, b]).expect("mul: shape mismatch")
}

pub fn matmul(a: &Tensor, b: &Tensor) -> AdResult<Tensor> {
    record(OpKind::Matmul, &[a, b])
}

pub fn relu(x: &Tensor) -> Tensor {
    record(OpKind::Relu, &[x]).expect("relu")
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    record(OpKind::Sigmoid, &[x]).expect("sigmoid")
}

pub fn log(x: &Tensor) -> Tensor {
    record(OpKind::Log, &[x]).expect("log")
}

pub fn exp(x: &Tensor) -> Tensor {
    record(OpKind::Exp, &[x]).expect("exp")
}

pub fn sqrt(x: &Tensor) -> Tensor {
    record(OpKind::Sqrt, &[x]).expect("sqrt")
}

pub fn sum(x: &Tensor) -> Tensor {
    record(OpKind::Sum, &[x]).expect("sum")
}

pub fn mean(x: &Tensor) -> Tensor {
    record(OpKind::Mean, &[x]).expect("mean")
}

pub fn reshape(x: &Tensor, shape: Vec<usize>) -> AdResult<Tensor> {
    record(OpKind::Reshape(shape), &[x])
}

pub fn permute(x: &Tensor, perm: &[usize]) -> AdResult<Tensor> {
    record(OpKind::Permute(perm.to_vec()), &[x])
}

/// 2-D transpose.
pub fn transpose(x: &Tensor) -> Tensor {
    permute(x, &[1, 0]).expect("transpose: rank-2 tensor required")
}

pub fn slice_rows(x: &Tensor, start: usize, len: usize) -> AdResult<Tensor> {
    record(OpKind::Slice { start, len }, &[x])
}

pub fn clamp(x: &Tensor, lo: f64, hi: f64) -> Tensor {
    record(OpKind::Clamp { lo, hi }, &[x]).expect("clamp")
}

pub fn scale(x: &Tensor, c: f64) -> Tensor {
    mul(x, &Tensor::scalar(c))
}

pub fn neg(x: &Tensor) -> Tensor {
    scale(x, -1.0)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    add(a, &neg(b))
}

/// 1/x for strictly positive x.
pub fn recip(x: &Tensor) -> Tensor {
    exp(&neg(&log(x)))
}

/// a/b for strictly positive b.
pub fn div(a: &Tensor, b: &Tensor) -> Tensor {
    mul(a, &recip(b))
}

pub fn dot(a: &Tensor, b: &Tensor) -> Tensor {
    sum(&mul(a, b))
}

/// Euclidean norm with a small guard so the gradient stays finite at zero.
pub fn l2_norm(x: &Tensor) -> Tensor {
    sqrt(&add(&sum(&mul(x, x)), &Tensor::scalar(1e-24)))
}

/// `x @ wᵀ + b` for a batch of row vectors: x `[n,in]`, w `[out,in]`, b `[out]`.
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> AdResult<Tensor> {
    let xw = matmul(x, &transpose(w))?;
    let n = xw.shape()[0];
    let out = xw.shape()[1];
    let bias_rows = matmul(&Tensor::ones(vec![n, 1]), &reshape(b, vec![1, out])?)?;
    Ok(add(&xw, &bias_rows))
}

/// Channel-mixing 1×1 convolution: w `[c_out,c_in]`, x `[n,c_in,h,w]`.
///
/// Applies the same c_out×c_in linear map at every spatial site.
pub fn conv1x1(w: &Tensor, x: &Tensor) -> AdResult<Tensor> {
    let (n, ci, h, wd) = match x.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        other => {
            return Err(super::AdError::InvalidArgument {
                op: "conv1x1",
                msg: format!("expected rank-4 input, got {:?}", other),
            })
        }
    };
    let co = w.shape()[0];
    if w.shape().len() != 2 || w.shape()[1] != ci {
        return Err(super::AdError::ShapeMismatch {
            op: "conv1x1",
            lhs: w.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let xc_first = permute(x, &[1, 0, 2, 3])?;
    let flat = reshape(&xc_first, vec![ci, n * h * wd])?;
    let mixed = matmul(w, &flat)?;
    let back = reshape(&mixed, vec![co, n, h, wd])?;
    permute(&back, &[1, 0, 2, 3])
}

/// Add a per-channel bias b `[c]` to x `[n,c,h,w]`.
pub fn channel_bias(x: &Tensor, b: &Tensor) -> AdResult<Tensor> {
    let (n, c, h, w) = match x.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        other => {
            return Err(super::AdError::InvalidArgument {
                op: "channel_bias",
                msg: format!("expected rank-4 input, got {:?}", other),
            })
        }
    };
    if b.numel() != c {
        return Err(super::AdError::ShapeMismatch {
            op: "channel_bias",
            lhs: x.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let cols = matmul(&reshape(b, vec![c, 1])?, &Tensor::ones(vec![1, n * h * w]))?;
    let bias = permute(&reshape(&cols, vec![c, n, h, w])?, &[1, 0, 2, 3])?;
    Ok(add(x, &bias))
}

/// Per-channel spatial mean: `[n,c,h,w]` → `[n,c]`.
pub fn spatial_mean(x: &Tensor) -> AdResult<Tensor> {
    let (n, c, h, w) = match x.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        other => {
            return Err(super::AdError::InvalidArgument {
                op: "spatial_mean",
                msg: format!("expected rank-4 input, got {:?}", other),
            })
        }
    };
    let flat = reshape(x, vec![n * c, h * w])?;
    let pooled = matmul(&flat, &Tensor::full(vec![h * w, 1], 1.0 / (h * w) as f64))?;
    reshape(&pooled, vec![n, c])
}
