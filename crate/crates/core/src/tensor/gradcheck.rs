//! Central finite-difference gradient checking.
//!
//! The checker only evaluates the forward pass at perturbed inputs, so it is
//! independent of every backward rule it validates.

use super::{Graph, NodeId, Tensor};
use crate::error::Result;

/// Step used by the acceptance gradient suite.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared on an absolute scale.
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `(input, element)` where the largest error occurred.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares backprop gradients of `build` against central differences.
///
/// `build` receives the graph and one parameter node per entry in `inputs`
/// and must return a scalar loss node. It is called `1 + 2·Σ numel` times.
pub fn check<F>(inputs: &[Tensor], step: f64, floor: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<_> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let ids: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| g.grad(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[k].numel()];
        for (e, slot) in grad.iter_mut().enumerate() {
            let x0 = inputs[k].data()[e];
            work[k].data_mut()[e] = x0 + step;
            let up = eval(&work)?;
            work[k].data_mut()[e] = x0 - step;
            let down = eval(&work)?;
            work[k].data_mut()[e] = x0;
            *slot = (up - down) / (2.0 * step);
        }
        numeric.push(Tensor::new(inputs[k].shape(), grad)?);
    }

    let mut max_rel_error = 0.0;
    let mut worst = (0, 0);
    for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (e, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let rel = (av - nv).abs() / av.abs().max(nv.abs()).max(floor);
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = (k, e);
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}
