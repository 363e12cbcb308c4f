//! Differentiable primitives.
//!
//! Shape rules, per kind:
//! - `Add`/`Sub`/`Mul`/`Div`: rhs has the lhs shape, a suffix of it, or a
//!   single element; it is broadcast over the leading axes. Output = lhs shape.
//! - `MatMul`: `[m,k]x[k,n]` or batched `[b,m,k]x[b,k,n]`; with `trans_b` the
//!   rhs is stored as `[n,k]` / `[b,n,k]`.
//! - `Permute`, `Reshape`: element count preserved.
//! - `Sum`, `Mean`, `Mse`: scalar output (shape `[]`).
//! - `SumAxis`/`MeanAxis`: the axis is removed.
//! - `Softmax`, `LayerNorm`, `L2Normalize`: along the last axis, shape kept.
//! - `LogSumExp`: last axis removed.
//! - `Conv1d`: `[c_in, l]` with weight `[c_out, c_in, k]`.
//! - `Conv3d`: `[c_in, d, h, w]` with weight `[c_out, c_in, kd, kh, kw]`.
//!   Both are cross-correlations (the kernel is not flipped).
//! - `IndexRows`: gathers rows along axis 0 (repeats allowed).
//! - `Concat`: along axis 0, trailing shapes equal.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels::{self, Conv3dGeom};
use super::{numel_of, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Relu,
    Gelu,
    Softplus,
    MatMul { trans_b: bool },
    Permute(Vec<usize>),
    Reshape(Vec<usize>),
    Sum,
    Mean,
    SumAxis(usize),
    MeanAxis(usize),
    Softmax,
    LogSumExp,
    LayerNorm { eps: f64 },
    L2Normalize,
    Conv1d { stride: usize, padding: usize },
    Conv3d { stride: [usize; 3], padding: [usize; 3] },
    IndexRows(Vec<usize>),
    Concat,
    Mse,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Neg => "neg",
            Primitive::Scale(_) => "scale",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::Exp => "exp",
            Primitive::Relu => "relu",
            Primitive::Gelu => "gelu",
            Primitive::Softplus => "softplus",
            Primitive::MatMul { .. } => "matmul",
            Primitive::Permute(_) => "permute",
            Primitive::Reshape(_) => "reshape",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::SumAxis(_) => "sum_axis",
            Primitive::MeanAxis(_) => "mean_axis",
            Primitive::Softmax => "softmax",
            Primitive::LogSumExp => "logsumexp",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::L2Normalize => "l2_normalize",
            Primitive::Conv1d { .. } => "conv1d",
            Primitive::Conv3d { .. } => "conv3d",
            Primitive::IndexRows(_) => "index_rows",
            Primitive::Concat => "concat",
            Primitive::Mse => "mse",
        }
    }

    /// `None` means variadic (at least one input).
    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div
            | Primitive::MatMul { .. }
            | Primitive::Conv1d { .. }
            | Primitive::Conv3d { .. }
            | Primitive::Mse => Some(2),
            Primitive::Concat => None,
            _ => Some(1),
        }
    }
}

fn err(kind: &Primitive, detail: String) -> Error {
    Error::shape(kind.name(), detail)
}

fn check_broadcast<T: Scalar>(kind: &Primitive, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if b.numel() == 1 || a.shape().ends_with(b.shape()) {
        Ok(())
    } else {
        Err(err(
            kind,
            format!("rhs {:?} does not broadcast onto lhs {:?}", b.shape(), a.shape()),
        ))
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel_of(&shape[..axis]);
    let inner = numel_of(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn last_axis(kind: &Primitive, shape: &[usize]) -> Result<(usize, usize)> {
    match shape.last() {
        Some(&n) => Ok((numel_of(shape) / n, n)),
        None => Err(err(kind, "needs rank >= 1".into())),
    }
}

struct MatGeom {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_geom<T: Scalar>(kind: &Primitive, trans_b: bool, a: &Tensor<T>, b: &Tensor<T>) -> Result<MatGeom> {
    let (sa, sb) = (a.shape(), b.shape());
    let (batch, m, k, bk, n) = match (sa.len(), sb.len()) {
        (2, 2) => {
            let (bk, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
            (1, sa[0], sa[1], bk, n)
        }
        (3, 3) if sa[0] == sb[0] => {
            let (bk, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
            (sa[0], sa[1], sa[2], bk, n)
        }
        _ => {
            return Err(err(
                kind,
                format!("operands {sa:?} x {sb:?} (trans_b={trans_b}) are not [m,k]x[k,n] or batched"),
            ))
        }
    };
    if k != bk {
        return Err(err(
            kind,
            format!("inner dimensions differ: {sa:?} x {sb:?} (trans_b={trans_b})"),
        ));
    }
    Ok(MatGeom { batch, m, k, n })
}

fn conv3d_geom<T: Scalar>(
    kind: &Primitive,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<Conv3dGeom> {
    let (si, sw) = (input.shape(), weight.shape());
    if si.len() != 4 || sw.len() != 5 {
        return Err(err(
            kind,
            format!("input {si:?} must be [c,d,h,w], weight {sw:?} must be [o,c,kd,kh,kw]"),
        ));
    }
    if si[0] != sw[1] {
        return Err(err(
            kind,
            format!("input channels {} != weight in-channels {}", si[0], sw[1]),
        ));
    }
    if stride.contains(&0) {
        return Err(err(kind, "stride must be positive".into()));
    }
    let mut out_dims = [0; 3];
    for ax in 0..3 {
        let span = si[ax + 1] + 2 * padding[ax];
        if span < sw[ax + 2] {
            return Err(err(
                kind,
                format!(
                    "kernel extent {} exceeds padded input {} on axis {ax}",
                    sw[ax + 2],
                    span
                ),
            ));
        }
        out_dims[ax] = (span - sw[ax + 2]) / stride[ax] + 1;
    }
    Ok(Conv3dGeom {
        c_in: si[0],
        c_out: sw[0],
        in_dims: [si[1], si[2], si[3]],
        kernel: [sw[2], sw[3], sw[4]],
        stride,
        padding,
        out_dims,
    })
}

fn conv1d_as_3d<T: Scalar>(
    kind: &Primitive,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Conv3dGeom> {
    let (si, sw) = (input.shape(), weight.shape());
    if si.len() != 2 || sw.len() != 3 {
        return Err(err(
            kind,
            format!("input {si:?} must be [c,l], weight {sw:?} must be [o,c,k]"),
        ));
    }
    let input3 = input.reshape(&[si[0], 1, 1, si[1]])?;
    let weight3 = weight.reshape(&[sw[0], sw[1], 1, 1, sw[2]])?;
    conv3d_geom(kind, &input3, &weight3, [1, 1, stride], [0, 0, padding])
}

fn permute_index_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    // For each output linear index, the input linear index.
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for ax in (0..rank.saturating_sub(1)).rev() {
        in_strides[ax] = in_strides[ax + 1] * shape[ax + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let total = numel_of(shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        map.push(idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum());
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn logsumexp_row<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

fn l2_norm<T: Scalar>(row: &[T]) -> T {
    row.iter().map(|&v| v * v).sum::<T>().sqrt()
}

/// Evaluates one primitive without recording anything.
pub fn apply_primitive<T: Scalar>(kind: &Primitive, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    match kind.arity() {
        Some(n) if inputs.len() != n => return Err(err(kind, format!("expects {n} inputs, got {}", inputs.len()))),
        None if inputs.is_empty() => return Err(err(kind, "expects at least one input".into())),
        _ => {}
    }
    let x = inputs[0];
    let unary = |f: &dyn Fn(T) -> T| Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect());
    match kind {
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
            let b = inputs[1];
            check_broadcast(kind, x, b)?;
            let (ad, bd) = (x.data(), b.data());
            let nb = bd.len();
            let data = ad
                .iter()
                .enumerate()
                .map(|(i, &av)| {
                    let bv = bd[i % nb];
                    match kind {
                        Primitive::Add => av + bv,
                        Primitive::Sub => av - bv,
                        Primitive::Mul => av * bv,
                        _ => av / bv,
                    }
                })
                .collect();
            Tensor::new(x.shape().to_vec(), data)
        }
        Primitive::Neg => unary(&|v| -v),
        Primitive::Scale(c) => {
            let c = T::of(*c);
            unary(&|v| v * c)
        }
        Primitive::AddScalar(c) => {
            let c = T::of(*c);
            unary(&|v| v + c)
        }
        Primitive::Exp => unary(&|v| v.exp()),
        Primitive::Relu => unary(&|v| v.max(T::zero())),
        Primitive::Gelu => unary(&gelu),
        Primitive::Softplus => unary(&softplus),
        Primitive::MatMul { trans_b } => {
            let b = inputs[1];
            let g = matmul_geom(kind, *trans_b, x, b)?;
            let mut out = vec![T::zero(); g.batch * g.m * g.n];
            let (sa, sb, so) = (g.m * g.k, g.k * g.n, g.m * g.n);
            for bi in 0..g.batch {
                let a_s = &x.data()[bi * sa..(bi + 1) * sa];
                let b_s = &b.data()[bi * sb..(bi + 1) * sb];
                let o_s = &mut out[bi * so..(bi + 1) * so];
                if *trans_b {
                    kernels::matmul_nt(a_s, b_s, o_s, g.m, g.k, g.n);
                } else {
                    kernels::matmul_nn(a_s, b_s, o_s, g.m, g.k, g.n);
                }
            }
            let shape = if g.batch == 1 && x.rank() == 2 {
                vec![g.m, g.n]
            } else {
                vec![g.batch, g.m, g.n]
            };
            Tensor::new(shape, out)
        }
        Primitive::Permute(perm) => {
            let mut seen = perm.clone();
            seen.sort_unstable();
            if perm.len() != x.rank() || seen.iter().enumerate().any(|(i, &p)| i != p) {
                return Err(err(kind, format!("{perm:?} is not a permutation of rank {}", x.rank())));
            }
            let map = permute_index_map(x.shape(), perm);
            let shape = perm.iter().map(|&p| x.shape()[p]).collect();
            Tensor::new(shape, map.iter().map(|&i| x.data()[i]).collect())
        }
        Primitive::Reshape(shape) => x.reshape(shape).map(|t| t.with_grad(false)),
        Primitive::Sum => Ok(Tensor::scalar(x.data().iter().copied().sum())),
        Primitive::Mean => Ok(Tensor::scalar(
            x.data().iter().copied().sum::<T>() / T::of(x.numel() as f64),
        )),
        Primitive::SumAxis(axis) | Primitive::MeanAxis(axis) => {
            if *axis >= x.rank() {
                return Err(err(kind, format!("axis {axis} out of range for {:?}", x.shape())));
            }
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            if matches!(kind, Primitive::MeanAxis(_)) {
                let scale = T::one() / T::of(len as f64);
                out.iter_mut().for_each(|v| *v *= scale);
            }
            let mut shape = x.shape().to_vec();
            shape.remove(*axis);
            Tensor::new(shape, out)
        }
        Primitive::Softmax => {
            let (rows, n) = last_axis(kind, x.shape())?;
            let mut out = vec![T::zero(); rows * n];
            for r in 0..rows {
                softmax_row(&x.data()[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
            }
            Tensor::new(x.shape().to_vec(), out)
        }
        Primitive::LogSumExp => {
            let (rows, n) = last_axis(kind, x.shape())?;
            let out = (0..rows)
                .map(|r| logsumexp_row(&x.data()[r * n..(r + 1) * n]))
                .collect();
            Tensor::new(x.shape()[..x.rank() - 1].to_vec(), out)
        }
        Primitive::LayerNorm { eps } => {
            let (rows, n) = last_axis(kind, x.shape())?;
            let eps = T::of(*eps);
            let inv_n = T::one() / T::of(n as f64);
            let mut out = vec![T::zero(); rows * n];
            for r in 0..rows {
                let row = &x.data()[r * n..(r + 1) * n];
                let mean = row.iter().copied().sum::<T>() * inv_n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
                let rstd = T::one() / (var + eps).sqrt();
                for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                    *o = (v - mean) * rstd;
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        }
        Primitive::L2Normalize => {
            let (rows, n) = last_axis(kind, x.shape())?;
            let mut out = vec![T::zero(); rows * n];
            for r in 0..rows {
                let row = &x.data()[r * n..(r + 1) * n];
                let norm = l2_norm(row);
                if !(norm > T::zero()) || !norm.is_finite() {
                    return Err(Error::NonFinite(format!("l2_normalize: row {r} has norm {norm}")));
                }
                for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                    *o = v / norm;
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        }
        Primitive::Conv1d { stride, padding } => {
            let g = conv1d_as_3d(kind, x, inputs[1], *stride, *padding)?;
            let out = kernels::conv3d_forward(x.data(), inputs[1].data(), &g);
            Tensor::new(vec![g.c_out, g.out_dims[2]], out)
        }
        Primitive::Conv3d { stride, padding } => {
            let g = conv3d_geom(kind, x, inputs[1], *stride, *padding)?;
            let out = kernels::conv3d_forward(x.data(), inputs[1].data(), &g);
            let [d, h, w] = g.out_dims;
            Tensor::new(vec![g.c_out, d, h, w], out)
        }
        Primitive::IndexRows(idx) => {
            if x.rank() == 0 || idx.is_empty() {
                return Err(err(kind, "needs rank >= 1 and a non-empty index list".into()));
            }
            let rows = x.shape()[0];
            if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
                return Err(err(kind, format!("row {bad} out of range for {rows} rows")));
            }
            let width = x.numel() / rows;
            let mut out = Vec::with_capacity(idx.len() * width);
            for &i in idx {
                out.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
            }
            let mut shape = x.shape().to_vec();
            shape[0] = idx.len();
            Tensor::new(shape, out)
        }
        Primitive::Concat => {
            let tail = &x.shape()[1.min(x.rank())..];
            if x.rank() == 0 {
                return Err(err(kind, "needs rank >= 1".into()));
            }
            let mut rows = 0;
            let mut out = Vec::new();
            for t in inputs {
                if t.rank() == 0 || &t.shape()[1..] != tail {
                    return Err(err(
                        kind,
                        format!("{:?} does not stack with trailing {tail:?}", t.shape()),
                    ));
                }
                rows += t.shape()[0];
                out.extend_from_slice(t.data());
            }
            let mut shape = vec![rows];
            shape.extend_from_slice(tail);
            Tensor::new(shape, out)
        }
        Primitive::Mse => {
            let b = inputs[1];
            if x.shape() != b.shape() {
                return Err(err(kind, format!("{:?} vs {:?}", x.shape(), b.shape())));
            }
            let total: T = x.data().iter().zip(b.data()).map(|(&p, &q)| (p - q) * (p - q)).sum();
            Ok(Tensor::scalar(total / T::of(x.numel() as f64)))
        }
    }
}

/// Gradients of the inputs given the output gradient. Entries are `None`
/// where `needs[i]` is false.
pub(crate) fn vjp<T: Scalar>(
    kind: &Primitive,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    grad: &[T],
    needs: &[bool],
) -> Vec<Option<Vec<T>>> {
    let mut res: Vec<Option<Vec<T>>> = vec![None; inputs.len()];
    let x = inputs[0];
    let elementwise = |f: &dyn Fn(usize) -> T| -> Vec<T> { (0..x.numel()).map(f).collect() };
    match kind {
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
            let b = inputs[1];
            let (ad, bd) = (x.data(), b.data());
            let nb = bd.len();
            if needs[0] {
                res[0] = Some(elementwise(&|i| match kind {
                    Primitive::Add | Primitive::Sub => grad[i],
                    Primitive::Mul => grad[i] * bd[i % nb],
                    _ => grad[i] / bd[i % nb],
                }));
            }
            if needs[1] {
                let mut gb = vec![T::zero(); nb];
                for i in 0..ad.len() {
                    let j = i % nb;
                    gb[j] += match kind {
                        Primitive::Add => grad[i],
                        Primitive::Sub => -grad[i],
                        Primitive::Mul => grad[i] * ad[i],
                        _ => -grad[i] * ad[i] / (bd[j] * bd[j]),
                    };
                }
                res[1] = Some(gb);
            }
        }
        Primitive::Neg => res[0] = Some(grad.iter().map(|&g| -g).collect()),
        Primitive::Scale(c) => {
            let c = T::of(*c);
            res[0] = Some(grad.iter().map(|&g| g * c).collect());
        }
        Primitive::AddScalar(_) | Primitive::Reshape(_) => res[0] = Some(grad.to_vec()),
        Primitive::Exp => res[0] = Some(elementwise(&|i| grad[i] * output.data()[i])),
        Primitive::Relu => {
            res[0] = Some(elementwise(&|i| {
                if x.data()[i] > T::zero() {
                    grad[i]
                } else {
                    T::zero()
                }
            }))
        }
        Primitive::Gelu => res[0] = Some(elementwise(&|i| grad[i] * gelu_grad(x.data()[i]))),
        Primitive::Softplus => res[0] = Some(elementwise(&|i| grad[i] * sigmoid(x.data()[i]))),
        Primitive::MatMul { trans_b } => {
            let b = inputs[1];
            let g = matmul_geom(kind, *trans_b, x, b).expect("validated in forward");
            let (sa, sb, so) = (g.m * g.k, g.k * g.n, g.m * g.n);
            let mut ga = needs[0].then(|| vec![T::zero(); x.numel()]);
            let mut gb = needs[1].then(|| vec![T::zero(); b.numel()]);
            for bi in 0..g.batch {
                let a_s = &x.data()[bi * sa..(bi + 1) * sa];
                let b_s = &b.data()[bi * sb..(bi + 1) * sb];
                let g_s = &grad[bi * so..(bi + 1) * so];
                if let Some(ga) = ga.as_mut() {
                    let out = &mut ga[bi * sa..(bi + 1) * sa];
                    if *trans_b {
                        // dA = dC * B, B stored [n,k]
                        kernels::matmul_nn(g_s, b_s, out, g.m, g.n, g.k);
                    } else {
                        // dA = dC * B^T, B stored [k,n]
                        kernels::matmul_nt(g_s, b_s, out, g.m, g.n, g.k);
                    }
                }
                if let Some(gb) = gb.as_mut() {
                    let out = &mut gb[bi * sb..(bi + 1) * sb];
                    if *trans_b {
                        // dB[n,k] = dC^T * A
                        kernels::matmul_tn(g_s, a_s, out, g.m, g.n, g.k);
                    } else {
                        // dB[k,n] = A^T * dC
                        kernels::matmul_tn(a_s, g_s, out, g.m, g.k, g.n);
                    }
                }
            }
            res[0] = ga;
            res[1] = gb;
        }
        Primitive::Permute(perm) => {
            let map = permute_index_map(x.shape(), perm);
            let mut gx = vec![T::zero(); x.numel()];
            for (o, &i) in map.iter().enumerate() {
                gx[i] = grad[o];
            }
            res[0] = Some(gx);
        }
        Primitive::Sum => res[0] = Some(vec![grad[0]; x.numel()]),
        Primitive::Mean => res[0] = Some(vec![grad[0] / T::of(x.numel() as f64); x.numel()]),
        Primitive::SumAxis(axis) | Primitive::MeanAxis(axis) => {
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let scale = if matches!(kind, Primitive::MeanAxis(_)) {
                T::one() / T::of(len as f64)
            } else {
                T::one()
            };
            let mut gx = vec![T::zero(); x.numel()];
            for o in 0..outer {
                let g_row = &grad[o * inner..(o + 1) * inner];
                for l in 0..len {
                    let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (d, &gv) in dst.iter_mut().zip(g_row) {
                        *d = gv * scale;
                    }
                }
            }
            res[0] = Some(gx);
        }
        Primitive::Softmax => {
            let n = *x.shape().last().expect("rank checked");
            let y = output.data();
            let mut gx = vec![T::zero(); x.numel()];
            for r in 0..x.numel() / n {
                let s = r * n..(r + 1) * n;
                let dotp: T = grad[s.clone()].iter().zip(&y[s.clone()]).map(|(&g, &v)| g * v).sum();
                for i in s {
                    gx[i] = y[i] * (grad[i] - dotp);
                }
            }
            res[0] = Some(gx);
        }
        Primitive::LogSumExp => {
            let n = *x.shape().last().expect("rank checked");
            let mut gx = vec![T::zero(); x.numel()];
            for r in 0..x.numel() / n {
                softmax_row(&x.data()[r * n..(r + 1) * n], &mut gx[r * n..(r + 1) * n]);
                for v in &mut gx[r * n..(r + 1) * n] {
                    *v *= grad[r];
                }
            }
            res[0] = Some(gx);
        }
        Primitive::LayerNorm { eps } => {
            let n = *x.shape().last().expect("rank checked");
            let eps = T::of(*eps);
            let inv_n = T::one() / T::of(n as f64);
            let y = output.data();
            let mut gx = vec![T::zero(); x.numel()];
            for r in 0..x.numel() / n {
                let s = r * n..(r + 1) * n;
                let row = &x.data()[s.clone()];
                let mean = row.iter().copied().sum::<T>() * inv_n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
                let rstd = T::one() / (var + eps).sqrt();
                let g_mean = grad[s.clone()].iter().copied().sum::<T>() * inv_n;
                let gy_mean: T = grad[s.clone()]
                    .iter()
                    .zip(&y[s.clone()])
                    .map(|(&g, &v)| g * v)
                    .sum::<T>()
                    * inv_n;
                for i in s {
                    gx[i] = rstd * (grad[i] - g_mean - y[i] * gy_mean);
                }
            }
            res[0] = Some(gx);
        }
        Primitive::L2Normalize => {
            let n = *x.shape().last().expect("rank checked");
            let y = output.data();
            let mut gx = vec![T::zero(); x.numel()];
            for r in 0..x.numel() / n {
                let s = r * n..(r + 1) * n;
                let norm = l2_norm(&x.data()[s.clone()]);
                let gy: T = grad[s.clone()].iter().zip(&y[s.clone()]).map(|(&g, &v)| g * v).sum();
                for i in s {
                    gx[i] = (grad[i] - y[i] * gy) / norm;
                }
            }
            res[0] = Some(gx);
        }
        Primitive::Conv1d { .. } | Primitive::Conv3d { .. } => {
            let w = inputs[1];
            let geom = match kind {
                Primitive::Conv1d { stride, padding } => conv1d_as_3d(kind, x, w, *stride, *padding),
                Primitive::Conv3d { stride, padding } => conv3d_geom(kind, x, w, *stride, *padding),
                _ => unreachable!(),
            }
            .expect("validated in forward");
            if needs[0] {
                res[0] = Some(kernels::conv3d_grad_input(grad, w.data(), &geom));
            }
            if needs[1] {
                res[1] = Some(kernels::conv3d_grad_weight(grad, x.data(), &geom));
            }
        }
        Primitive::IndexRows(idx) => {
            let width = x.numel() / x.shape()[0];
            let mut gx = vec![T::zero(); x.numel()];
            for (o, &i) in idx.iter().enumerate() {
                for (d, &gv) in gx[i * width..(i + 1) * width]
                    .iter_mut()
                    .zip(&grad[o * width..(o + 1) * width])
                {
                    *d += gv;
                }
            }
            res[0] = Some(gx);
        }
        Primitive::Concat => {
            let mut offset = 0;
            for (slot, t) in inputs.iter().enumerate() {
                if needs[slot] {
                    res[slot] = Some(grad[offset..offset + t.numel()].to_vec());
                }
                offset += t.numel();
            }
        }
        Primitive::Mse => {
            let b = inputs[1];
            let scale = T::of(2.0) * grad[0] / T::of(x.numel() as f64);
            if needs[0] {
                res[0] = Some(elementwise(&|i| scale * (x.data()[i] - b.data()[i])));
            }
            if needs[1] {
                res[1] = Some(elementwise(&|i| scale * (b.data()[i] - x.data()[i])));
            }
        }
    }
    for (slot, need) in needs.iter().enumerate() {
        if !need {
            res[slot] = None;
        }
    }
    res
}
