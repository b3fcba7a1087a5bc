//! Reverse-mode sweep. Every rule appends ordinary primitive nodes, so the
//! gradients it produces can be differentiated again.

use alloc::vec;
use alloc::vec::Vec;

use super::{Graph, NodeId, Op};
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub(super) fn grad(g: &mut Graph, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
    g.check(loss)?;
    for &w in wrt {
        g.check(w)?;
    }
    let loss_shape = g.shape(loss).to_vec();
    if numel(&loss_shape) != 1 {
        return Err(Error::NonScalarLoss(loss_shape));
    }
    let last = loss.0;

    // Nodes lying on some path from a `wrt` node to `loss`.
    let mut reaches_loss = vec![false; last + 1];
    reaches_loss[last] = true;
    for i in (0..=last).rev() {
        if reaches_loss[i] {
            for input in &g.nodes[i].inputs {
                reaches_loss[input.0] = true;
            }
        }
    }
    let mut from_wrt = vec![false; last + 1];
    for &w in wrt {
        if w.0 <= last {
            from_wrt[w.0] = true;
        }
    }
    for i in 0..=last {
        if !from_wrt[i] && g.nodes[i].inputs.iter().any(|x| from_wrt[x.0]) {
            from_wrt[i] = true;
        }
    }
    let on_path: Vec<bool> = (0..=last).map(|i| reaches_loss[i] && from_wrt[i]).collect();

    let mut adjoint: Vec<Option<NodeId>> = vec![None; last + 1];
    if on_path[last] {
        adjoint[last] = Some(g.full(&loss_shape, 1.0));
    }
    for i in (0..=last).rev() {
        let Some(upstream) = adjoint[i] else { continue };
        if !on_path[i] {
            continue;
        }
        let node = g.nodes[i].clone();
        if node.inputs.iter().all(|x| !on_path[x.0]) {
            continue;
        }
        for (slot, contribution) in vjp(g, node.op, &node.inputs, NodeId(i), upstream)? {
            let target = node.inputs[slot];
            if !on_path[target.0] {
                continue;
            }
            adjoint[target.0] = Some(match adjoint[target.0] {
                Some(acc) => g.add(acc, contribution)?,
                None => contribution,
            });
        }
    }

    wrt.iter()
        .map(|&w| match adjoint.get(w.0).copied().flatten() {
            Some(a) => Ok(a),
            None => {
                let shape = g.shape(w).to_vec();
                Ok(g.constant(Tensor::zeros(&shape)))
            }
        })
        .collect()
}

/// Vector-Jacobian products of one node: `(input slot, contribution)` pairs.
fn vjp(
    g: &mut Graph,
    op: Op,
    inputs: &[NodeId],
    out: NodeId,
    up: NodeId,
) -> Result<Vec<(usize, NodeId)>> {
    let x = inputs.first().copied().unwrap_or(out);
    let mut terms = Vec::with_capacity(inputs.len());
    match op {
        Op::Constant | Op::Parameter | Op::Step { .. } | Op::ArgMax { .. } => {}
        Op::Add => {
            terms.push((0, up));
            terms.push((1, up));
        }
        Op::Sub => {
            terms.push((0, up));
            terms.push((1, g.neg(up)?));
        }
        Op::Mul => {
            terms.push((0, g.mul(up, inputs[1])?));
            terms.push((1, g.mul(up, inputs[0])?));
        }
        Op::Div => {
            let b = inputs[1];
            terms.push((0, g.div(up, b)?));
            let t = g.mul(up, out)?;
            let t = g.div(t, b)?;
            terms.push((1, g.neg(t)?));
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let bt = g.transpose(b)?;
            terms.push((0, g.matmul(up, bt)?));
            let at = g.transpose(a)?;
            terms.push((1, g.matmul(at, up)?));
        }
        Op::Transpose => terms.push((0, g.transpose(up)?)),
        Op::Sum { axis } | Op::Mean { axis } => {
            let in_shape = g.shape(x).to_vec();
            let mut keep = in_shape.clone();
            keep[axis] = 1;
            let r = g.reshape(up, &keep)?;
            let mut spread = g.broadcast(r, &in_shape)?;
            if let Op::Mean { .. } = op {
                spread = g.scale(spread, 1.0 / in_shape[axis] as f64)?;
            }
            terms.push((0, spread));
        }
        Op::Broadcast => {
            let in_shape = g.shape(x).to_vec();
            terms.push((0, g.reduce_to(up, &in_shape)?));
        }
        Op::Reshape => {
            let in_shape = g.shape(x).to_vec();
            terms.push((0, g.reshape(up, &in_shape)?));
        }
        Op::Concat { axis } => {
            let mut start = 0;
            for (slot, &input) in inputs.iter().enumerate() {
                let len = g.shape(input)[axis];
                terms.push((slot, g.slice(up, axis, start, len)?));
                start += len;
            }
        }
        Op::Slice { axis, start } => {
            let in_shape = g.shape(x).to_vec();
            let len = g.shape(out)[axis];
            let mut parts = Vec::with_capacity(3);
            if start > 0 {
                let mut s = in_shape.clone();
                s[axis] = start;
                parts.push(g.constant(Tensor::zeros(&s)));
            }
            parts.push(up);
            let rest = in_shape[axis] - start - len;
            if rest > 0 {
                let mut s = in_shape.clone();
                s[axis] = rest;
                parts.push(g.constant(Tensor::zeros(&s)));
            }
            terms.push((0, g.concat(&parts, axis)?));
        }
        Op::Relu => {
            let mask = g.step(x, 0.0)?;
            terms.push((0, g.mul(up, mask)?));
        }
        Op::ClampMin { floor } => {
            let mask = g.step(x, floor)?;
            terms.push((0, g.mul(up, mask)?));
        }
        Op::Exp => terms.push((0, g.mul(up, out)?)),
        Op::Log => terms.push((0, g.div(up, x)?)),
        Op::Sqrt => {
            let twice = g.scale(out, 2.0)?;
            terms.push((0, g.div(up, twice)?));
        }
        Op::Softmax { axis } => {
            let shape = g.shape(out).to_vec();
            let gy = g.mul(up, out)?;
            let s = g.sum_keep(gy, axis)?;
            let s = g.broadcast(s, &shape)?;
            let centered = g.sub(up, s)?;
            terms.push((0, g.mul(out, centered)?));
        }
        Op::CrossEntropyWithLogits => {
            // Targets are treated as constants.
            let (logits, targets) = (inputs[0], inputs[1]);
            let shape = g.shape(logits).to_vec();
            let p = g.softmax(logits, 1)?;
            let mass = g.sum_keep(targets, 1)?;
            let mass = g.broadcast(mass, &shape)?;
            let scaled = g.mul(p, mass)?;
            let diff = g.sub(scaled, targets)?;
            let col = g.reshape(up, &[shape[0], 1])?;
            let col = g.broadcast(col, &shape)?;
            terms.push((0, g.mul(col, diff)?));
        }
        Op::CosineSimilarity => {
            let (a, b) = (inputs[0], inputs[1]);
            let (ra, a_hat) = normalized(g, a)?;
            let (rb, b_hat) = normalized(g, b)?;
            let g_a_hat = g.matmul(up, b_hat)?;
            let up_t = g.transpose(up)?;
            let g_b_hat = g.matmul(up_t, a_hat)?;
            terms.push((0, normalize_vjp(g, a, ra, g_a_hat)?));
            terms.push((1, normalize_vjp(g, b, rb, g_b_hat)?));
        }
        Op::RowInvNorm => terms.push((0, inv_norm_vjp(g, x, out, up)?)),
        Op::Im2Col { kh, kw } => {
            let in_shape = g.shape(x).to_vec();
            terms.push((0, g.col2im(up, &in_shape, kh, kw)?));
        }
        Op::Col2Im { kh, kw } => terms.push((0, g.im2col(up, kh, kw)?)),
    }
    Ok(terms)
}

/// Spreads a per-row vector `[n]` over a `[n, d]` matrix.
fn spread_rows(g: &mut Graph, v: NodeId, shape: &[usize]) -> Result<NodeId> {
    let col = g.reshape(v, &[shape[0], 1])?;
    g.broadcast(col, shape)
}

/// `(1/||row||, row/||row||)` for a matrix node.
fn normalized(g: &mut Graph, x: NodeId) -> Result<(NodeId, NodeId)> {
    let shape = g.shape(x).to_vec();
    let r = g.row_inv_norm(x)?;
    let rs = spread_rows(g, r, &shape)?;
    Ok((r, g.mul(x, rs)?))
}

/// Adjoint of `x -> x * r(x)` given upstream `up` for the normalized rows.
fn normalize_vjp(g: &mut Graph, x: NodeId, r: NodeId, up: NodeId) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let rs = spread_rows(g, r, &shape)?;
    let direct = g.mul(up, rs)?;
    let ux = g.mul(up, x)?;
    let g_r = g.sum(ux, 1)?;
    let via_norm = inv_norm_vjp(g, x, r, g_r)?;
    g.add(direct, via_norm)
}

/// `d r / d x = -x * r^3` per row.
fn inv_norm_vjp(g: &mut Graph, x: NodeId, r: NodeId, up: NodeId) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let r2 = g.mul(r, r)?;
    let r3 = g.mul(r2, r)?;
    let w = g.mul(up, r3)?;
    let w = g.neg(w)?;
    let ws = spread_rows(g, w, &shape)?;
    g.mul(x, ws)
}
