//! Central finite differences as an oracle for [`Graph::backward`].

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// `(f(p + eps·e_i) - f(p - eps·e_i)) / 2eps` for every coordinate of every
/// parameter tensor.
pub fn central_differences<F>(mut f: F, params: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let mut probe: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor::zeros(params[p].shape());
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            probe[p].data_mut()[i] = orig + eps;
            let plus = f(&probe)?;
            probe[p].data_mut()[i] = orig - eps;
            let minus = f(&probe)?;
            probe[p].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "objective not finite at parameter {p}, coordinate {i}"
                )));
            }
            grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
        out.push(grad);
    }
    Ok(out)
}

/// `max |a - n| / max(1, |a|, |n|)` over all coordinates.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape());
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let denom = 1.0f64.max(libm::fabs(x)).max(libm::fabs(y));
            worst = worst.max(libm::fabs(x - y) / denom);
        }
    }
    worst
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences. `build` receives the parameter node ids in the same
/// order as `params` and returns the loss node.
pub fn grad_check<F>(build: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &ids)?;
    if !g.value(loss).is_finite() {
        return Err(Error::Numeric("objective not finite at the base point".into()));
    }
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|&id| grads.get(id).cloned().expect("gradient for every parameter"))
        .collect();

    let numeric = central_differences(
        |probe| {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = probe.iter().map(|p| g.constant(p.clone())).collect();
            let loss = build(&mut g, &ids)?;
            Ok(g.value(loss).item())
        },
        params,
        eps,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}
