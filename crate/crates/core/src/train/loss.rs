//! Deeply supervised reconstruction loss.
//!
//! Per sample the final estimate contributes `||x_K - x||^2` and the two
//! preceding estimates contribute `beta * (||x_{K-1} - x||^2 + ||x_{K-2} - x||^2)`
//! (or `beta * ||x_{K-1} - x||^2 + ||x_{K-2} - x||^2` with
//! `beta_applies_to_both = false`). Norms are sums over every pixel and band;
//! the batch reduction is a mean over samples. Terms for phases that do not
//! exist (K < 3) are dropped.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optics::Cube;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub beta_applies_to_both: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { beta: 0.5, beta_applies_to_both: true }
    }
}

/// Builds the loss for estimates `x_1..x_K` of a batch of `batch` samples.
pub fn loss_on_graph(g: &mut Graph, estimates: &[Var], gt: Var, batch: usize, w: LossWeights) -> Result<Var> {
    let k = estimates.len();
    if k == 0 || batch == 0 {
        return Err(Error::Usage("loss needs at least one estimate and one sample".into()));
    }
    let mut total = g.squared_distance(estimates[k - 1], gt)?;
    if k >= 2 {
        let t1 = g.squared_distance(estimates[k - 2], gt)?;
        let t1 = g.scale(t1, w.beta);
        total = g.add(total, t1)?;
    }
    if k >= 3 {
        let t2 = g.squared_distance(estimates[k - 3], gt)?;
        let t2 = if w.beta_applies_to_both { g.scale(t2, w.beta) } else { t2 };
        total = g.add(total, t2)?;
    }
    Ok(g.scale(total, 1.0 / batch as f64))
}

/// Loss of one sample from plain cubes; `x_km1` and `x_km2` may be absent.
pub fn loss(x_k: &Cube, x_km1: Option<&Cube>, x_km2: Option<&Cube>, gt: &Cube, w: LossWeights) -> Result<f64> {
    if x_km2.is_some() && x_km1.is_none() {
        return Err(Error::Usage("x_{K-2} given without x_{K-1}".into()));
    }
    let mut g = Graph::new();
    let gt_v = g.constant(gt.to_tensor());
    let mut est = Vec::new();
    for c in [x_km2, x_km1].into_iter().flatten().chain(std::iter::once(x_k)) {
        est.push(g.constant(c.to_tensor()));
    }
    let l = loss_on_graph(&mut g, &est, gt_v, 1, w)?;
    Ok(g.value(l).data()[0])
}
