//! Central finite-difference verification of recorded gradients.

use super::graph::{Graph, NodeId};
use crate::error::{shape_err, Result};
use crate::par;

/// One differentiable input handed to [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckInput {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl GradCheckInput {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Self {
        GradCheckInput { data, shape }
    }
}

/// Compare the analytic gradient of a scalar-valued builder against central
/// finite differences at every coordinate of every input.
///
/// Returns the maximum of |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn grad_check<F>(f: F, inputs: &[GradCheckInput], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + Sync,
{
    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|inp| g.leaf(inp.data.clone(), inp.shape.clone(), true))
        .collect::<Result<_>>()?;
    let out = f(&mut g, &ids)?;
    if g.data(out).len() != 1 {
        return Err(shape_err!(
            "grad_check requires a scalar function, got output shape {:?}",
            g.shape(out)
        ));
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, inp)| g.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inp.data.len()]))
        .collect();

    let eval = |data: &[Vec<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = data
            .iter()
            .zip(inputs)
            .map(|(d, inp)| g.leaf(d.clone(), inp.shape.clone(), false))
            .collect::<Result<_>>()?;
        let out = f(&mut g, &ids)?;
        Ok(g.value(out))
    };

    // One job per coordinate: (input index, coordinate index).
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, inp)| (0..inp.data.len()).map(move |j| (i, j)))
        .collect();
    let base: Vec<Vec<f64>> = inputs.iter().map(|i| i.data.clone()).collect();

    let errs = par::map_ordered(&coords, |&(i, j)| -> Result<f64> {
        let mut plus = base.clone();
        plus[i][j] += eps;
        let fp = eval(&plus)?;
        let mut minus = base.clone();
        minus[i][j] -= eps;
        let fm = eval(&minus)?;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i][j];
        Ok((a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs()))
    });

    let mut max_err: f64 = 0.0;
    for e in errs {
        max_err = max_err.max(e?);
    }
    Ok(max_err)
}
