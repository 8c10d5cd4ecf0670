//! Multi-level supervised loss.
//!
//! The ground truth is average-pooled to each level and scaled by `1/2` per
//! level. Every stage output (M, S and R) at a level is penalized with that
//! level's weight.

use super::config::{level_index, LossKind};
use super::{ForwardVars, LevelFlows};
use crate::error::{Error, Result};
use crate::tensor::{avg_pool2x, BackwardRule, Element, Tape, Tensor, Var};

/// Ground truth at flow level `level`.
pub fn gt_at_level<E: Element>(gt: &Tensor<E>, level: usize) -> Result<Tensor<E>> {
    let mut out = gt.clone();
    for _ in 1..level {
        out = avg_pool2x(&out)?.scale(E::lit(0.5));
    }
    Ok(out)
}

fn rho(sq: f64, kind: LossKind) -> (f64, f64) {
    // value and derivative with respect to the squared norm
    match kind {
        LossKind::L2 => (sq, 1.0),
        LossKind::Charbonnier { epsilon, exponent } => {
            let base = sq + epsilon * epsilon;
            (base.powf(exponent), exponent * base.powf(exponent - 1.0))
        }
    }
}

fn check_flows<E: Element>(est: &Tensor<E>, gt: &Tensor<E>) -> Result<(usize, usize)> {
    let (c, h, w) = est.dims3()?;
    if c != 2 {
        return Err(Error::ShapeMismatch { op: "flow_penalty", dim: "channels", expected: 2, actual: c });
    }
    est.expect_same_shape(gt, "flow_penalty")?;
    Ok((h, w))
}

/// `Σ_pixels ρ(‖est − gt‖²)`.
pub fn flow_penalty<E: Element>(est: &Tensor<E>, gt: &Tensor<E>, kind: LossKind) -> Result<f64> {
    let (h, w) = check_flows(est, gt)?;
    let plane = h * w;
    let (e, g) = (est.data(), gt.data());
    Ok((0..plane)
        .map(|p| {
            let du = (e[p] - g[p]).as_f64();
            let dv = (e[plane + p] - g[plane + p]).as_f64();
            rho(du * du + dv * dv, kind).0
        })
        .sum())
}

struct PenaltyRule<E: Element> {
    gt: Tensor<E>,
    kind: LossKind,
}

impl<E: Element> BackwardRule<E> for PenaltyRule<E> {
    fn name(&self) -> &'static str {
        "flow_penalty"
    }

    fn backward(&self, inputs: &[&Tensor<E>], _: &Tensor<E>, grad: &Tensor<E>, _: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        let est = inputs[0];
        let (h, w) = check_flows(est, &self.gt)?;
        let plane = h * w;
        let (e, g) = (est.data(), self.gt.data());
        let up = grad.item().as_f64();
        let mut out = vec![E::zero(); 2 * plane];
        for p in 0..plane {
            let du = (e[p] - g[p]).as_f64();
            let dv = (e[plane + p] - g[plane + p]).as_f64();
            let d = rho(du * du + dv * dv, self.kind).1 * 2.0 * up;
            out[p] = E::lit(d * du);
            out[plane + p] = E::lit(d * dv);
        }
        Ok(vec![Some(Tensor::new(vec![2, h, w], out)?)])
    }
}

impl<E: Element> Tape<E> {
    /// Scalar penalty of `est` against a constant ground truth.
    pub fn flow_penalty(&mut self, est: Var, gt: Tensor<E>, kind: LossKind) -> Result<Var> {
        let value = flow_penalty(self.value(est), &gt, kind)?;
        Ok(self.push(Tensor::scalar(E::lit(value)), vec![est], Box::new(PenaltyRule { gt, kind })))
    }
}

fn find_level<T>(flows: &[LevelFlows<T>], level: usize) -> Result<&LevelFlows<T>> {
    flows.iter().find(|l| l.level == level).ok_or(Error::MissingLevel(level))
}

/// Loss of per-level estimates against a full-resolution ground truth.
/// Every level in `levels` must be present in `flows`.
pub fn multi_level_loss<E: Element>(
    flows: &[LevelFlows<Tensor<E>>],
    gt: &Tensor<E>,
    kind: LossKind,
    loss_weights: &[f64; 5],
    levels: &[usize],
) -> Result<f64> {
    let mut total = 0.0;
    for &level in levels {
        let l = find_level(flows, level)?;
        let g = gt_at_level(gt, level)?;
        let weight = loss_weights[level_index(level)];
        for est in l.stages() {
            total += weight * flow_penalty(est, &g, kind)?;
        }
    }
    Ok(total)
}

/// Tape version of [`multi_level_loss`] over every level of a forward pass.
pub fn multi_level_loss_on_tape<E: Element>(
    tape: &mut Tape<E>,
    vars: &ForwardVars,
    gt: &Tensor<E>,
    kind: LossKind,
    loss_weights: &[f64; 5],
) -> Result<Var> {
    let mut terms = Vec::new();
    for l in &vars.levels {
        let g = gt_at_level(gt, l.level)?;
        let weight = loss_weights[level_index(l.level)];
        for &est in l.stages() {
            terms.push((tape.flow_penalty(est, g.clone(), kind)?, weight));
        }
    }
    let loss = tape.weighted_sum(&terms)?;
    tape.label(loss, "loss");
    Ok(loss)
}
