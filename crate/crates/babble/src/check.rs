//! Gradient verification by central finite differences.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Compare the backward pass of `f` against central finite differences at `x`.
///
/// Returns `max_i |analytic_i - (f(x+h e_i) - f(x-h e_i)) / 2h| / max(1, |analytic_i|)`.
/// `f` must build a scalar loss from the given leaf and be deterministic
/// across calls (pre-draw any randomness or reseed inside the closure).
pub fn finite_difference_check<F>(mut f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, NodeId) -> Result<NodeId>,
{
    let errs = finite_difference_errors(&mut f, x, h)?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

/// Per-coordinate relative errors, for callers that want the full picture.
pub fn finite_difference_errors<F>(f: &mut F, x: &Tensor, h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::Contract(format!("finite difference step {} outside (0, 1e-2]", h)));
    }
    let mut g = Graph::new();
    let mut base = x.clone();
    base.requires_grad = true;
    base.grad = None;
    let xid = g.leaf(base);
    let loss = f(&mut g, xid)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::Contract(format!(
            "finite difference check needs a scalar loss, got {:?}",
            g.value(loss).shape
        )));
    }
    g.backward(loss)?;
    let analytic = g
        .grad(xid)
        .ok_or_else(|| Error::Contract("loss does not depend on the checked tensor".into()))?
        .to_vec();

    let mut errs = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let fp = eval_at(f, x, i, h)?;
        let fm = eval_at(f, x, i, -h)?;
        let fd = (fp - fm) / (2.0 * h);
        let denom = f64::max(1.0, analytic[i].abs());
        errs.push((analytic[i] - fd).abs() / denom);
    }
    Ok(errs)
}

fn eval_at<F>(f: &mut F, x: &Tensor, coord: usize, delta: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let mut probe = x.clone();
    probe.requires_grad = false;
    probe.grad = None;
    probe.data[coord] += delta;
    let xid = g.leaf(probe);
    let loss = f(&mut g, xid)?;
    Ok(g.value(loss).item())
}

/// Finite-difference check over several leaves at once; returns the max
/// relative error across all coordinates of all tensors.
pub fn finite_difference_check_multi<F>(mut f: F, xs: &[Tensor], h: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::Contract(format!("finite difference step {} outside (0, 1e-2]", h)));
    }
    let mut g = Graph::new();
    let ids: Vec<NodeId> = xs
        .iter()
        .map(|x| {
            let mut t = x.clone();
            t.requires_grad = true;
            t.grad = None;
            g.leaf(t)
        })
        .collect();
    let loss = f(&mut g, &ids)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::Contract("finite difference check needs a scalar loss".into()));
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|id| g.grad(*id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(*id).numel()]))
        .collect();

    let mut max_err: f64 = 0.0;
    for (ti, x) in xs.iter().enumerate() {
        for i in 0..x.numel() {
            let fp = eval_multi_at(&mut f, xs, ti, i, h)?;
            let fm = eval_multi_at(&mut f, xs, ti, i, -h)?;
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic[ti][i];
            let err = (a - fd).abs() / f64::max(1.0, a.abs());
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

fn eval_multi_at<F>(f: &mut F, xs: &[Tensor], ti: usize, coord: usize, delta: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = xs
        .iter()
        .enumerate()
        .map(|(j, x)| {
            let mut t = x.clone();
            t.requires_grad = false;
            t.grad = None;
            if j == ti {
                t.data[coord] += delta;
            }
            g.leaf(t)
        })
        .collect();
    let loss = f(&mut g, &ids)?;
    Ok(g.value(loss).item())
}
