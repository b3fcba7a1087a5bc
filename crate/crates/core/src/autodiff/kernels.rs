//! Forward evaluation of each primitive.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::Op;
use crate::error::{Error, Result};
use crate::tensor::{argmax, numel, Tensor};

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn out(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("kernel output matches inferred shape")
}

pub(super) fn forward(op: Op, args: &[&Tensor], shape: &[usize]) -> Result<Tensor> {
    let x = args[0];
    Ok(match op {
        Op::Constant | Op::Parameter => unreachable!("leaves are resolved by the evaluator"),
        Op::Add => x.zip_map(args[1], "add", |a, b| a + b)?,
        Op::Sub => x.zip_map(args[1], "sub", |a, b| a - b)?,
        Op::Mul => x.zip_map(args[1], "mul", |a, b| a * b)?,
        Op::Div => {
            if let Some(pos) = args[1].data().iter().position(|&v| v == 0.0) {
                return Err(Error::Domain {
                    op: "div",
                    detail: format!("zero denominator at element {pos}"),
                });
            }
            x.zip_map(args[1], "div", |a, b| a / b)?
        }
        Op::MatMul => matmul(x, args[1]),
        Op::Transpose => transpose(x),
        Op::Sum { axis } => reduce(x, axis, shape, false),
        Op::Mean { axis } => reduce(x, axis, shape, true),
        Op::Broadcast => broadcast(x, shape),
        Op::Reshape => x.clone().reshaped(shape.to_vec())?,
        Op::Concat { axis } => concat(args, axis, shape),
        Op::Slice { axis, start } => slice(x, axis, start, shape),
        Op::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
        Op::Step { threshold } => x.map(|v| if v > threshold { 1.0 } else { 0.0 }),
        Op::Exp => x.map(libm::exp),
        Op::Log => {
            positive(x, "log")?;
            x.map(libm::log)
        }
        Op::Sqrt => {
            positive(x, "sqrt")?;
            x.map(libm::sqrt)
        }
        Op::ClampMin { floor } => x.map(|v| if v > floor { v } else { floor }),
        Op::Softmax { axis } => softmax(x, axis),
        Op::CrossEntropyWithLogits => cross_entropy(x, args[1]),
        Op::CosineSimilarity => cosine(x, args[1]),
        Op::RowInvNorm => {
            let data = x.rows().map(inv_norm).collect();
            out(shape, data)
        }
        Op::Im2Col { kh, kw } => im2col(x, kh, kw, shape),
        Op::Col2Im { kh, kw } => col2im(x, kh, kw, shape),
        Op::ArgMax { axis } => {
            let (outer, len, inner) = split(x.shape(), axis);
            let d = x.data();
            let mut data = Vec::with_capacity(outer * inner);
            let mut lane = vec![0.0; len];
            for o in 0..outer {
                for i in 0..inner {
                    for (k, slot) in lane.iter_mut().enumerate() {
                        *slot = d[(o * len + k) * inner + i];
                    }
                    data.push(argmax(&lane) as f64);
                }
            }
            out(shape, data)
        }
    })
}

fn positive(x: &Tensor, op: &'static str) -> Result<()> {
    match x.data().iter().position(|&v| v <= 0.0 || v.is_nan()) {
        Some(pos) => Err(Error::Domain {
            op,
            detail: format!("element {pos} is {}", x.data()[pos]),
        }),
        None => Ok(()),
    }
}

pub(crate) fn inv_norm(row: &[f64]) -> f64 {
    let sq: f64 = row.iter().map(|v| v * v).sum();
    if sq == 0.0 {
        0.0
    } else {
        1.0 / libm::sqrt(sq)
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut data = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut data[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (r, &bv) in row.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                *r += av * bv;
            }
        }
    }
    out(&[n, m], data)
}

fn transpose(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (rows, cols) = (s[0], s[1]);
    let block = numel(&s[2..]);
    let d = x.data();
    let mut data = Vec::with_capacity(d.len());
    for c in 0..cols {
        for r in 0..rows {
            let at = (r * cols + c) * block;
            data.extend_from_slice(&d[at..at + block]);
        }
    }
    let mut shape = s.to_vec();
    shape.swap(0, 1);
    out(&shape, data)
}

fn reduce(x: &Tensor, axis: usize, shape: &[usize], mean: bool) -> Tensor {
    let (outer, len, inner) = split(x.shape(), axis);
    let d = x.data();
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for k in 0..len {
            let src = &d[(o * len + k) * inner..(o * len + k + 1) * inner];
            for (acc, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *acc += v;
            }
        }
    }
    if mean {
        let inv = len as f64;
        for v in &mut data {
            *v /= inv;
        }
    }
    out(shape, data)
}

fn broadcast(x: &Tensor, shape: &[usize]) -> Tensor {
    let rank = shape.len();
    let pad = rank - x.rank();
    // Source strides in target coordinates; 0 on broadcast axes.
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for axis in (0..x.rank()).rev() {
        let dim = x.shape()[axis];
        strides[axis + pad] = if dim == 1 { 0 } else { acc };
        acc *= dim;
    }
    let total = numel(shape);
    let d = x.data();
    let mut data = Vec::with_capacity(total);
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        data.push(d[offset]);
        for axis in (0..rank).rev() {
            index[axis] += 1;
            offset += strides[axis];
            if index[axis] < shape[axis] {
                break;
            }
            offset -= strides[axis] * index[axis];
            index[axis] = 0;
        }
    }
    out(shape, data)
}

fn concat(args: &[&Tensor], axis: usize, shape: &[usize]) -> Tensor {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    let mut data = Vec::with_capacity(numel(shape));
    for o in 0..outer {
        for a in args {
            let chunk = a.shape()[axis] * inner;
            data.extend_from_slice(&a.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    out(shape, data)
}

fn slice(x: &Tensor, axis: usize, start: usize, shape: &[usize]) -> Tensor {
    let (outer, len, inner) = split(x.shape(), axis);
    let take = shape[axis];
    let d = x.data();
    let mut data = Vec::with_capacity(numel(shape));
    for o in 0..outer {
        let at = (o * len + start) * inner;
        data.extend_from_slice(&d[at..at + take * inner]);
    }
    out(shape, data)
}

fn softmax(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = split(x.shape(), axis);
    let d = x.data();
    let mut data = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = libm::exp(d[at(k)] - max);
                data[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                data[at(k)] /= total;
            }
        }
    }
    out(x.shape(), data)
}

/// Row-wise `log(sum(exp(row)))`, shifted by the row maximum.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = row.iter().map(|&v| libm::exp(v - max)).sum();
    max + libm::log(total)
}

fn cross_entropy(logits: &Tensor, targets: &Tensor) -> Tensor {
    let data = logits
        .rows()
        .zip(targets.rows())
        .map(|(z, y)| {
            let lse = log_sum_exp(z);
            z.iter().zip(y).map(|(&zi, &yi)| yi * (lse - zi)).sum()
        })
        .collect();
    out(&[logits.shape()[0]], data)
}

fn cosine(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, m) = (a.shape()[0], b.shape()[0]);
    let b_inv: Vec<f64> = b.rows().map(inv_norm).collect();
    let mut data = Vec::with_capacity(n * m);
    for ra in a.rows() {
        let a_inv = inv_norm(ra);
        for (rb, &bi) in b.rows().zip(&b_inv) {
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            data.push(dot * a_inv * bi);
        }
    }
    out(&[n, m], data)
}

fn im2col(x: &Tensor, kh: usize, kw: usize, shape: &[usize]) -> Tensor {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let cols = shape[1];
    let d = x.data();
    let mut data = vec![0.0; numel(shape)];
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                for bi in 0..b {
                    for y in 0..oh {
                        let src = ((bi * c + ci) * h + y + i) * w + j;
                        let dst = row * cols + (bi * oh + y) * ow;
                        data[dst..dst + ow].copy_from_slice(&d[src..src + ow]);
                    }
                }
            }
        }
    }
    out(shape, data)
}

fn col2im(cols_t: &Tensor, kh: usize, kw: usize, shape: &[usize]) -> Tensor {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let cols = cols_t.shape()[1];
    let d = cols_t.data();
    let mut data = vec![0.0; numel(shape)];
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                for bi in 0..b {
                    for y in 0..oh {
                        let dst = ((bi * c + ci) * h + y + i) * w + j;
                        let src = row * cols + (bi * oh + y) * ow;
                        for (t, &v) in data[dst..dst + ow].iter_mut().zip(&d[src..src + ow]) {
                            *t += v;
                        }
                    }
                }
            }
        }
    }
    out(shape, data)
}
