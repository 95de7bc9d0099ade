//! Central-difference gradient checking.

use super::graph::{Graph, NodeId};
use super::network::{BoundNetwork, DenseNetwork};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// Number of scalar parameters compared.
    pub checked: usize,
    /// Scalar parameters skipped because their network is frozen.
    pub frozen_skipped: usize,
}

/// Compares reverse-mode gradients of `loss` against central differences for
/// every parameter of every non-frozen network in `nets`.
///
/// `loss` receives the graph, the bound networks (same order as `nets`) and
/// the input node, and must return a scalar node.
pub fn grad_check<F>(nets: &[&DenseNetwork], input: &Tensor, loss: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[BoundNetwork], NodeId) -> Result<NodeId>,
{
    assert!(eps > 0.0, "grad_check needs a positive step");

    let evaluate = |nets: &[DenseNetwork]| -> Result<f64> {
        let mut g = Graph::new();
        let bound: Vec<BoundNetwork> = nets.iter().map(|n| n.bind(&mut g)).collect();
        let x = g.constant(input.clone());
        let out = loss(&mut g, &bound, x)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let bound: Vec<BoundNetwork> = nets.iter().map(|n| n.bind(&mut g)).collect();
    let x = g.constant(input.clone());
    let out = loss(&mut g, &bound, x)?;
    let grads = g.backward(out)?;

    let mut owned: Vec<DenseNetwork> = nets.iter().map(|&n| n.clone()).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        frozen_skipped: 0,
    };
    for (ni, b) in bound.iter().enumerate() {
        if nets[ni].frozen {
            report.frozen_skipped += nets[ni].param_count();
            continue;
        }
        let analytic = b.param_grads(&grads);
        for (pi, a) in analytic.iter().enumerate() {
            for k in 0..a.len() {
                let original = owned[ni].params()[pi].data()[k];
                owned[ni].params_mut()[pi].data_mut()[k] = original + eps;
                let up = evaluate(&owned)?;
                owned[ni].params_mut()[pi].data_mut()[k] = original - eps;
                let down = evaluate(&owned)?;
                owned[ni].params_mut()[pi].data_mut()[k] = original;

                let numeric = (up - down) / (2.0 * eps);
                let an = a.data()[k];
                let denom = an.abs().max(numeric.abs()).max(1e-8);
                report.max_rel_error = report.max_rel_error.max((an - numeric).abs() / denom);
                report.checked += 1;
            }
        }
    }
    Ok(report)
}

/// Applies the bound networks one after another.
pub fn chain(g: &mut Graph, nets: &[BoundNetwork], x: NodeId) -> Result<NodeId> {
    nets.iter().try_fold(x, |h, n| n.forward(g, h))
}
