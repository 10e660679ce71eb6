//! Central finite-difference verification of analytic gradients.

use super::{Graph, NodeId, Result, Tensor, TensorError};

/// Compares the analytic gradient of `f` at `point` against central
/// finite differences with the given step, in 64-bit arithmetic.
///
/// `f` receives a fresh graph and the id of the point leaf, and must
/// return a scalar node. Returns the maximum over coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn gradcheck<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    let analytic = {
        let mut g = Graph::new();
        let x = g.leaf(point.clone(), true);
        let loss = f(&mut g, x)?;
        if !g.value(loss).is_scalar() {
            return Err(TensorError::BackwardNonScalar {
                shape: g.value(loss).shape().to_vec(),
            });
        }
        g.backward(loss)?;
        g.grad(x)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; point.len()])
    };

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(point.shape().to_vec(), data)?, false);
        let loss = f(&mut g, x)?;
        let v = g.value(loss).data()[0];
        if !v.is_finite() {
            return Err(TensorError::NonFinite { context: "gradcheck" });
        }
        Ok(v)
    };

    let mut max_rel = 0.0_f64;
    let base = point.data();
    for i in 0..base.len() {
        let mut plus = base.to_vec();
        plus[i] += step;
        let mut minus = base.to_vec();
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
