//! Flow regularization unit R: feature-driven local convolution (f-lconv).
//!
//! A conv stack maps `[F1, flow − mean(flow), occlusion]` to a distance map
//! `D` with `w²` channels. Per position the filter is `exp(−D²)/Σ exp(−D²)`,
//! and the flow is replaced by the filter-weighted average of its `w×w`
//! neighborhood. One filter bank serves both flow channels.

use std::hash::Hasher;

use crate::error::{Error, Result};
use crate::pipeline::arch::{self, run_stack};
use crate::pipeline::{ModelConfig, ModelWeights};
use crate::tensor::{channel_softmax, fold_patches, hash_flags, negative_square, BackwardRule, Element, Tape, Tensor, Var};
use crate::warp::warp_image;

/// Per-pixel Euclidean norm over channels: `(C, H, W)` → `(1, H, W)`.
pub fn channel_norm<E: Element>(input: &Tensor<E>) -> Result<Tensor<E>> {
    let (c, h, w) = input.dims3()?;
    let plane = h * w;
    Ok(Tensor::from_fn(&[1, h, w], |p| {
        (0..c).map(|ch| input.data()[ch * plane + p].powi(2)).sum::<E>().sqrt()
    }))
}

/// Gradient of [`channel_norm`]; zero where the norm vanishes.
pub fn channel_norm_backward<E: Element>(input: &Tensor<E>, output: &Tensor<E>, grad: &Tensor<E>) -> Result<Tensor<E>> {
    let (_, h, w) = input.dims3()?;
    let plane = h * w;
    Ok(Tensor::from_fn(input.shape(), |i| {
        let p = i % plane;
        let n = output.data()[p];
        if n == E::zero() {
            E::zero()
        } else {
            grad.data()[p] * input.data()[i] / n
        }
    }))
}

/// Brightness error `‖warp(im2, flow) − im1‖₂` over RGB.
pub fn occlusion_map<E: Element>(im1: &Tensor<E>, im2: &Tensor<E>, flow: &Tensor<E>) -> Result<Tensor<E>> {
    let warped = warp_image(im2, flow)?;
    channel_norm(&warped.sub(im1)?)
}

/// Subtracts each channel's spatial mean.
pub fn remove_mean<E: Element>(flow: &Tensor<E>) -> Result<Tensor<E>> {
    let (c, h, w) = flow.dims3()?;
    let plane = h * w;
    let means: Vec<E> = (0..c)
        .map(|ch| flow.channel(ch).iter().copied().sum::<E>() / E::lit(plane as f64))
        .collect();
    Ok(Tensor::from_fn(flow.shape(), |i| flow.data()[i] - means[i / plane]))
}

/// Filters from a distance map: `softmax(−D²)` over channels.
pub fn build_filters<E: Element>(distance: &Tensor<E>) -> Result<Tensor<E>> {
    channel_softmax(&negative_square(distance))
}

fn check_lconv<E: Element>(flow: &Tensor<E>, filters: &Tensor<E>) -> Result<usize> {
    let (taps, _, _) = filters.dims3()?;
    flow.expect_same_extent(filters, "f_lconv")?;
    let window = (taps as f64).sqrt().round() as usize;
    if window * window != taps || window % 2 == 0 {
        return Err(Error::shape("f_lconv", format!("{taps} filter channels is not an odd square window")));
    }
    Ok(window)
}

/// Local convolution through the fold/pack path: each flow channel is folded
/// into `w²` columns and dotted with the filter column at the same position.
pub fn f_lconv<E: Element>(flow: &Tensor<E>, filters: &Tensor<E>) -> Result<Tensor<E>> {
    let window = check_lconv(flow, filters)?;
    let (c, h, w) = flow.dims3()?;
    let taps = window * window;
    let plane = h * w;
    let folded = fold_patches(flow, window)?;
    let g = filters.data();
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        let p = i % plane;
        let col = &folded.data()[i * taps..(i + 1) * taps];
        col.iter().enumerate().map(|(j, &f)| f * g[j * plane + p]).sum()
    }))
}

/// Gradients of [`f_lconv`] with respect to the flow and the filters.
pub fn f_lconv_backward<E: Element>(
    flow: &Tensor<E>,
    filters: &Tensor<E>,
    grad: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let window = check_lconv(flow, filters)?;
    let (c, h, w) = flow.dims3()?;
    let taps = window * window;
    let plane = h * w;
    let half = (window / 2) as isize;
    let folded = fold_patches(flow, window)?;
    let g = filters.data();
    let mut dflow = vec![E::zero(); c * plane];
    let mut dfilt = vec![E::zero(); taps * plane];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let go = grad.data()[ch * plane + p];
                let col = &folded.data()[(ch * plane + p) * taps..(ch * plane + p + 1) * taps];
                for j in 0..taps {
                    dfilt[j * plane + p] = dfilt[j * plane + p] + go * col[j];
                    let sy = y as isize + (j / window) as isize - half;
                    let sx = x as isize + (j % window) as isize - half;
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        let q = ch * plane + sy as usize * w + sx as usize;
                        dflow[q] = dflow[q] + go * g[j * plane + p];
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![c, h, w], dflow)?, Tensor::new(vec![taps, h, w], dfilt)?))
}

struct NormRule;

impl<E: Element> BackwardRule<E> for NormRule {
    fn name(&self) -> &'static str {
        "channel_norm"
    }

    fn backward(&self, inputs: &[&Tensor<E>], output: &Tensor<E>, grad: &Tensor<E>, _: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        Ok(vec![Some(channel_norm_backward(inputs[0], output, grad)?)])
    }

    fn branches(&self, _: &[&Tensor<E>], output: &Tensor<E>, state: &mut dyn Hasher) {
        hash_flags(output.data().iter().map(|&n| n == E::zero()), state);
    }
}

struct RemoveMeanRule;

impl<E: Element> BackwardRule<E> for RemoveMeanRule {
    fn name(&self) -> &'static str {
        "remove_mean"
    }

    fn backward(&self, _: &[&Tensor<E>], _: &Tensor<E>, grad: &Tensor<E>, _: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        // the map is symmetric, so its adjoint is itself
        Ok(vec![Some(remove_mean(grad)?)])
    }
}

struct LconvRule;

impl<E: Element> BackwardRule<E> for LconvRule {
    fn name(&self) -> &'static str {
        "f_lconv"
    }

    fn backward(&self, inputs: &[&Tensor<E>], _: &Tensor<E>, grad: &Tensor<E>, _: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        let (dflow, dfilt) = f_lconv_backward(inputs[0], inputs[1], grad)?;
        Ok(vec![Some(dflow), Some(dfilt)])
    }
}

impl<E: Element> Tape<E> {
    pub fn channel_norm(&mut self, input: Var) -> Result<Var> {
        let out = channel_norm(self.value(input))?;
        Ok(self.push(out, vec![input], Box::new(NormRule)))
    }

    pub fn remove_mean(&mut self, input: Var) -> Result<Var> {
        let out = remove_mean(self.value(input))?;
        Ok(self.push(out, vec![input], Box::new(RemoveMeanRule)))
    }

    pub fn f_lconv(&mut self, flow: Var, filters: Var) -> Result<Var> {
        let out = f_lconv(self.value(flow), self.value(filters))?;
        Ok(self.push(out, vec![flow, filters], Box::new(LconvRule)))
    }
}

/// Occlusion map on the tape; differentiable in `flow`.
pub fn occlusion_unit<E: Element>(tape: &mut Tape<E>, im1: Var, im2: Var, flow: Var) -> Result<Var> {
    let (c, _, _) = tape.value(im2).dims3()?;
    if c != 3 {
        return Err(Error::ShapeMismatch { op: "occlusion_map", dim: "channels", expected: 3, actual: c });
    }
    let warped = tape.f_warp(im2, flow)?;
    let diff = tape.sub(warped, im1)?;
    tape.channel_norm(diff)
}

/// Distance map `D` (`w²` channels) from the first features, the flow and
/// the occlusion map.
pub fn distance_metric<E: Element>(
    tape: &mut Tape<E>,
    weights: &ModelWeights<E>,
    cfg: &ModelConfig,
    level: usize,
    f1: Var,
    flow: Var,
    occ: Var,
) -> Result<Var> {
    let centered = tape.remove_mean(flow)?;
    tape.label(centered, format!("rm-flow{level}_R"));
    let input = tape.concat(&[f1, centered, occ])?;
    tape.label(input, format!("concat{level}_R"));
    run_stack(tape, weights, &arch::regularizer_layers(cfg, level), input, cfg.leaky_slope)
}

pub fn regularization_unit<E: Element>(
    tape: &mut Tape<E>,
    weights: &ModelWeights<E>,
    cfg: &ModelConfig,
    level: usize,
    f1: Var,
    im1: Var,
    im2: Var,
    flow_s: Var,
) -> Result<Var> {
    let occ = occlusion_unit(tape, im1, im2, flow_s)?;
    tape.label(occ, format!("norm{level}_R"));
    let d = distance_metric(tape, weights, cfg, level, f1, flow_s, occ)?;
    let negsq = tape.negative_square(d);
    let filters = tape.channel_softmax(negsq)?;
    tape.label(filters, format!("softmax{level}_R"));
    let flow = tape.f_lconv(flow_s, filters)?;
    tape.label(flow, format!("flow{level}_R"));
    Ok(flow)
}
