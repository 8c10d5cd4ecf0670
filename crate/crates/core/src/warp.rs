//! Differentiable bilinear warping of feature maps and images by a flow field.
//!
//! `out(x) = Σ F(xᵢ)·(1−|xₛ−xᵢ|)·(1−|yₛ−yᵢ|)` over the four integer neighbors
//! of the source point `xₛ = x + flow(x)`. Neighbors outside the grid
//! contribute zero. At integer source coordinates the flow gradient takes the
//! right-continuous branch (`floor` picks the lower neighbor).

use std::hash::Hasher;

use crate::error::{Error, Result};
use crate::tensor::{BackwardRule, Element, Tape, Tensor, Var};

/// Two-channel displacement field: channel 0 is `u` (rightward), channel 1
/// is `v` (downward), in pixels of its own resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<E: Element = f32>(Tensor<E>);

impl<E: Element> FlowField<E> {
    pub fn new(tensor: Tensor<E>) -> Result<Self> {
        let (c, _, _) = tensor.dims3()?;
        if c != 2 {
            return Err(Error::ShapeMismatch {
                op: "flow",
                dim: "channels",
                expected: 2,
                actual: c,
            });
        }
        tensor.validate("flow field")?;
        Ok(FlowField(tensor))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField(Tensor::zeros(&[2, height, width]))
    }

    pub fn constant(height: usize, width: usize, u: E, v: E) -> Self {
        let plane = height * width;
        FlowField(Tensor::from_fn(&[2, height, width], |i| if i < plane { u } else { v }))
    }

    pub fn tensor(&self) -> &Tensor<E> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<E> {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn u(&self) -> &[E] {
        self.0.channel(0)
    }

    pub fn v(&self) -> &[E] {
        self.0.channel(1)
    }

    /// Top-left `height × width` window.
    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        let (h, w) = (self.height(), self.width());
        if height == 0 || width == 0 || height > h || width > w {
            return Err(Error::InvalidArgument(format!("cannot crop a {w}x{h} flow to {width}x{height}")));
        }
        let plane = height * width;
        Ok(FlowField(Tensor::from_fn(&[2, height, width], |i| {
            let (c, y, x) = (i / plane, (i % plane) / width, i % width);
            self.0.data()[(c * h + y) * w + x]
        })))
    }
}

/// One bilinear tap: flat source index (if inside the grid) and weight, plus
/// the weight's partials with respect to `xₛ` and `yₛ`.
#[derive(Clone, Copy)]
struct Tap<E> {
    index: Option<usize>,
    weight: E,
    dx: E,
    dy: E,
}

fn taps<E: Element>(x: usize, y: usize, u: E, v: E, h: usize, w: usize) -> [Tap<E>; 4] {
    let one = E::one();
    let xs = E::lit(x as f64) + u;
    let ys = E::lit(y as f64) + v;
    let fx = xs.floor();
    let fy = ys.floor();
    let ax = xs - fx;
    let ay = ys - fy;
    let (x0, y0) = (fx.as_f64() as i64, fy.as_f64() as i64);
    let at = |xi: i64, yi: i64| {
        (xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h).then(|| yi as usize * w + xi as usize)
    };
    [
        Tap { index: at(x0, y0), weight: (one - ax) * (one - ay), dx: -(one - ay), dy: -(one - ax) },
        Tap { index: at(x0 + 1, y0), weight: ax * (one - ay), dx: one - ay, dy: -ax },
        Tap { index: at(x0, y0 + 1), weight: (one - ax) * ay, dx: -ay, dy: one - ax },
        Tap { index: at(x0 + 1, y0 + 1), weight: ax * ay, dx: ay, dy: ax },
    ]
}

fn check_pair<E: Element>(feature: &Tensor<E>, flow: &Tensor<E>) -> Result<(usize, usize, usize)> {
    let (c, h, w) = feature.dims3()?;
    let (fc, _, _) = flow.dims3()?;
    if fc != 2 {
        return Err(Error::ShapeMismatch { op: "f_warp", dim: "flow channels", expected: 2, actual: fc });
    }
    feature.expect_same_extent(flow, "f_warp")?;
    Ok((c, h, w))
}

/// Warps every channel of `feature` by the same flow.
pub fn f_warp<E: Element>(feature: &Tensor<E>, flow: &Tensor<E>) -> Result<Tensor<E>> {
    let (c, h, w) = check_pair(feature, flow)?;
    let plane = h * w;
    let (fu, fv) = (flow.channel(0), flow.channel(1));
    let src = feature.data();
    let mut out = vec![E::zero(); c * plane];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let t = taps(x, y, fu[p], fv[p], h, w);
            for ch in 0..c {
                let base = ch * plane;
                // Accumulate only taps with non-zero weight so that zero and
                // integer flows reproduce the source bits exactly.
                let mut acc: Option<E> = None;
                for tap in &t {
                    if let (Some(i), true) = (tap.index, tap.weight != E::zero()) {
                        let term = src[base + i] * tap.weight;
                        acc = Some(acc.map_or(term, |a| a + term));
                    }
                }
                out[base + p] = acc.unwrap_or_else(E::zero);
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Gradients of [`f_warp`] with respect to the feature map and the flow.
pub fn f_warp_backward<E: Element>(
    feature: &Tensor<E>,
    flow: &Tensor<E>,
    grad: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (c, h, w) = check_pair(feature, flow)?;
    let plane = h * w;
    let (fu, fv) = (flow.channel(0), flow.channel(1));
    let src = feature.data();
    let g = grad.data();
    let mut dfeat = vec![E::zero(); c * plane];
    let mut dflow = vec![E::zero(); 2 * plane];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let t = taps(x, y, fu[p], fv[p], h, w);
            let (mut du, mut dv) = (E::zero(), E::zero());
            for ch in 0..c {
                let base = ch * plane;
                let go = g[base + p];
                for tap in &t {
                    if let Some(i) = tap.index {
                        dfeat[base + i] = dfeat[base + i] + go * tap.weight;
                        du = du + go * src[base + i] * tap.dx;
                        dv = dv + go * src[base + i] * tap.dy;
                    }
                }
            }
            dflow[p] = du;
            dflow[plane + p] = dv;
        }
    }
    Ok((Tensor::new(vec![c, h, w], dfeat)?, Tensor::new(vec![2, h, w], dflow)?))
}

/// Same semantics as [`f_warp`] for a 3-channel image.
pub fn warp_image<E: Element>(image: &Tensor<E>, flow: &Tensor<E>) -> Result<Tensor<E>> {
    let (c, _, _) = image.dims3()?;
    if c != 3 {
        return Err(Error::ShapeMismatch { op: "warp_image", dim: "channels", expected: 3, actual: c });
    }
    f_warp(image, flow)
}

struct WarpRule;

impl<E: Element> BackwardRule<E> for WarpRule {
    fn name(&self) -> &'static str {
        "f_warp"
    }

    fn backward(&self, inputs: &[&Tensor<E>], _: &Tensor<E>, grad: &Tensor<E>, _: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        let (df, dflow) = f_warp_backward(inputs[0], inputs[1], grad)?;
        Ok(vec![Some(df), Some(dflow)])
    }

    fn branches(&self, inputs: &[&Tensor<E>], _: &Tensor<E>, state: &mut dyn Hasher) {
        let flow = inputs[1];
        let (_, h, w) = flow.dims3().expect("checked in forward");
        let (fu, fv) = (flow.channel(0), flow.channel(1));
        for p in 0..h * w {
            state.write_i64((E::lit((p % w) as f64) + fu[p]).floor().as_f64() as i64);
            state.write_i64((E::lit((p / w) as f64) + fv[p]).floor().as_f64() as i64);
        }
    }
}

impl<E: Element> Tape<E> {
    pub fn f_warp(&mut self, feature: Var, flow: Var) -> Result<Var> {
        let out = f_warp(self.value(feature), self.value(flow))?;
        Ok(self.push(out, vec![feature, flow], Box::new(WarpRule)))
    }
}
