use alloc::format;
use alloc::vec::Vec;

use super::{Graph, NodeId, Op};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference estimate of `d loss / d wrt` for a bound parameter.
pub fn finite_diff(graph: &Graph, loss: NodeId, wrt: NodeId, h: f64) -> Result<Tensor> {
    graph.check(loss)?;
    graph.check(wrt)?;
    if graph.node(wrt).op != Op::Parameter {
        return Err(Error::InvalidShape {
            op: "finite_diff",
            detail: format!("node {} is not a parameter leaf", wrt.0),
        });
    }
    let shape = graph.shape(loss);
    if shape.iter().product::<usize>() != 1 {
        return Err(Error::NonScalarLoss(shape.to_vec()));
    }
    let base = graph.binding(wrt).cloned().ok_or_else(|| Error::Unbound {
        node: wrt.0,
        name: graph.name(wrt).unwrap_or_default().into(),
    })?;
    let mut probe = base.clone();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let x = base.data()[i];
        probe.data_mut()[i] = x + h;
        let up = graph.evaluate(&[loss], Some((wrt, &probe)))?[0].data()[0];
        probe.data_mut()[i] = x - h;
        let down = graph.evaluate(&[loss], Some((wrt, &probe)))?[0].data()[0];
        probe.data_mut()[i] = x;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(base.shape().to_vec(), out)
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute difference norm when
/// both are below `1e-8`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| libm::sqrt(v.map(|x| x * x).sum::<f64>());
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}
