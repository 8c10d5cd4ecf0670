//! Descriptor matching: correlation cost volumes and the matching unit that
//! filters them into a residual flow.
//!
//! Channel `d` of a cost volume encodes the displacement
//! `(dx, dy) = ((d % n) − R, (d / n) − R) · displacement_stride` with
//! `n = 2R + 1` taps per axis and `R = radius / displacement_stride`.
//! Displaced positions outside the grid cost 0.
//!
//! With `sample_stride = 2`, costs are computed only at even `(x, y)` and
//! the remaining positions are filled by bilinear interpolation of the
//! sampled grid (clamped at the border), before any filtering.

use crate::error::{Error, Result};
use crate::pipeline::arch::{self, run_stack};
use crate::pipeline::{ModelConfig, ModelWeights};
use crate::tensor::{BackwardRule, Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchConfig {
    /// Largest displacement searched, in pixels.
    pub radius: usize,
    /// Spacing of displacement taps.
    pub displacement_stride: usize,
    /// Spacing of the positions at which matching is evaluated.
    pub sample_stride: usize,
}

impl MatchConfig {
    pub fn dense(radius: usize) -> Self {
        MatchConfig { radius, displacement_stride: 1, sample_stride: 1 }
    }

    pub fn taps_per_axis(&self) -> usize {
        2 * (self.radius / self.displacement_stride) + 1
    }

    pub fn channels(&self) -> usize {
        self.taps_per_axis() * self.taps_per_axis()
    }

    /// `(dx, dy)` of volume channel `d`.
    pub fn displacement(&self, d: usize) -> (isize, isize) {
        let n = self.taps_per_axis();
        let r = (self.radius / self.displacement_stride) as isize;
        let s = self.displacement_stride as isize;
        (((d % n) as isize - r) * s, ((d / n) as isize - r) * s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.displacement_stride == 0 || self.sample_stride == 0 {
            return Err(Error::Config("match strides must be positive".into()));
        }
        if self.radius % self.displacement_stride != 0 {
            return Err(Error::Config(format!(
                "match radius {} is not a multiple of displacement stride {}",
                self.radius, self.displacement_stride
            )));
        }
        Ok(())
    }
}

/// Matching cost `f1·f2 / N`.
pub fn correlate<E: Element>(f1: &[E], f2: &[E]) -> Result<E> {
    if f1.len() != f2.len() {
        return Err(Error::ShapeMismatch { op: "correlate", dim: "feature length", expected: f1.len(), actual: f2.len() });
    }
    if f1.is_empty() {
        return Err(Error::InvalidArgument("correlate: empty feature vectors".into()));
    }
    let dot: E = f1.iter().zip(f2).map(|(&a, &b)| a * b).sum();
    Ok(dot / E::lit(f1.len() as f64))
}

/// Extent of the sampled grid along an axis of length `n`.
fn grid_len(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// Per output coordinate: lower/upper grid index and upper weight.
fn grid_taps(n: usize, stride: usize) -> Vec<(usize, usize, f64)> {
    let g = grid_len(n, stride);
    (0..n)
        .map(|i| {
            let lo = (i / stride).min(g - 1);
            let hi = (lo + 1).min(g - 1);
            let t = if hi == lo { 0.0 } else { (i % stride) as f64 / stride as f64 };
            (lo, hi, t)
        })
        .collect()
}

fn check_features<E: Element>(f1: &Tensor<E>, f2: &Tensor<E>) -> Result<(usize, usize, usize)> {
    let (c, h, w) = f1.dims3()?;
    let (c2, _, _) = f2.dims3()?;
    if c != c2 {
        return Err(Error::ShapeMismatch { op: "cost_volume", dim: "channels", expected: c, actual: c2 });
    }
    f1.expect_same_extent(f2, "cost_volume")?;
    Ok((c, h, w))
}

/// Costs at the sampled grid only: shape `(D, gh, gw)`.
fn sampled_volume<E: Element>(f1: &Tensor<E>, f2: &Tensor<E>, cfg: &MatchConfig) -> Result<Tensor<E>> {
    let (c, h, w) = check_features(f1, f2)?;
    let s = cfg.sample_stride;
    let (gh, gw) = (grid_len(h, s), grid_len(w, s));
    let channels = cfg.channels();
    let n = E::lit(c as f64);
    let mut out = vec![E::zero(); channels * gh * gw];
    for d in 0..channels {
        let (dx, dy) = cfg.displacement(d);
        let plane = &mut out[d * gh * gw..(d + 1) * gh * gw];
        for gy in 0..gh {
            let y = gy * s;
            let y2 = y as isize + dy;
            if y2 < 0 || y2 >= h as isize {
                continue;
            }
            let row = &mut plane[gy * gw..(gy + 1) * gw];
            for ch in 0..c {
                let a = &f1.channel(ch)[y * w..(y + 1) * w];
                let b = &f2.channel(ch)[y2 as usize * w..(y2 as usize + 1) * w];
                for (gx, acc) in row.iter_mut().enumerate() {
                    let x = gx * s;
                    let x2 = x as isize + dx;
                    if x2 >= 0 && x2 < w as isize {
                        *acc = *acc + a[x] * b[x2 as usize];
                    }
                }
            }
            row.iter_mut().for_each(|v| *v = *v / n);
        }
    }
    Tensor::new(vec![channels, gh, gw], out)
}

fn interpolate_grid<E: Element>(grid: &Tensor<E>, h: usize, w: usize, stride: usize) -> Result<Tensor<E>> {
    let (channels, gh, gw) = grid.dims3()?;
    let ty = grid_taps(h, stride);
    let tx = grid_taps(w, stride);
    let lerp = |a: E, b: E, t: f64| a + (b - a) * E::lit(t);
    Ok(Tensor::from_fn(&[channels, h, w], |i| {
        let d = i / (h * w);
        let (y0, y1, fy) = ty[(i / w) % h];
        let (x0, x1, fx) = tx[i % w];
        let g = &grid.data()[d * gh * gw..];
        let top = lerp(g[y0 * gw + x0], g[y0 * gw + x1], fx);
        let bot = lerp(g[y1 * gw + x0], g[y1 * gw + x1], fx);
        lerp(top, bot, fy)
    }))
}

fn interpolate_grid_backward<E: Element>(grad: &Tensor<E>, gh: usize, gw: usize, stride: usize) -> Result<Tensor<E>> {
    let (channels, h, w) = grad.dims3()?;
    let ty = grid_taps(h, stride);
    let tx = grid_taps(w, stride);
    let one = E::one();
    let mut out = vec![E::zero(); channels * gh * gw];
    for d in 0..channels {
        let g = &grad.data()[d * h * w..(d + 1) * h * w];
        let o = &mut out[d * gh * gw..(d + 1) * gh * gw];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = E::lit(fy);
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = E::lit(fx);
                let v = g[y * w + x];
                o[y0 * gw + x0] = o[y0 * gw + x0] + v * (one - fy) * (one - fx);
                o[y0 * gw + x1] = o[y0 * gw + x1] + v * (one - fy) * fx;
                o[y1 * gw + x0] = o[y1 * gw + x0] + v * fy * (one - fx);
                o[y1 * gw + x1] = o[y1 * gw + x1] + v * fy * fx;
            }
        }
    }
    Tensor::new(vec![channels, gh, gw], out)
}

/// Correlation cost volume between `f1` and (warped) `f2`.
pub fn build_cost_volume<E: Element>(f1: &Tensor<E>, f2: &Tensor<E>, cfg: &MatchConfig) -> Result<Tensor<E>> {
    cfg.validate()?;
    let sampled = sampled_volume(f1, f2, cfg)?;
    if cfg.sample_stride == 1 {
        return Ok(sampled);
    }
    let (_, h, w) = f1.dims3()?;
    interpolate_grid(&sampled, h, w, cfg.sample_stride)
}

/// Gradients of [`build_cost_volume`] with respect to both feature maps.
pub fn cost_volume_backward<E: Element>(
    f1: &Tensor<E>,
    f2: &Tensor<E>,
    grad: &Tensor<E>,
    cfg: &MatchConfig,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (c, h, w) = check_features(f1, f2)?;
    let s = cfg.sample_stride;
    let (gh, gw) = (grid_len(h, s), grid_len(w, s));
    let g = if s == 1 { grad.clone() } else { interpolate_grid_backward(grad, gh, gw, s)? };
    let norm = E::one() / E::lit(c as f64);
    let mut d1 = vec![E::zero(); c * h * w];
    let mut d2 = vec![E::zero(); c * h * w];
    for d in 0..cfg.channels() {
        let (dx, dy) = cfg.displacement(d);
        let plane = &g.data()[d * gh * gw..(d + 1) * gh * gw];
        for gy in 0..gh {
            let y = gy * s;
            let y2 = y as isize + dy;
            if y2 < 0 || y2 >= h as isize {
                continue;
            }
            let y2 = y2 as usize;
            for gx in 0..gw {
                let x = gx * s;
                let x2 = x as isize + dx;
                if x2 < 0 || x2 >= w as isize {
                    continue;
                }
                let gv = plane[gy * gw + gx] * norm;
                if gv == E::zero() {
                    continue;
                }
                let (p1, p2) = (y * w + x, y2 * w + x2 as usize);
                for ch in 0..c {
                    let base = ch * h * w;
                    d1[base + p1] = d1[base + p1] + gv * f2.data()[base + p2];
                    d2[base + p2] = d2[base + p2] + gv * f1.data()[base + p1];
                }
            }
        }
    }
    Ok((Tensor::new(vec![c, h, w], d1)?, Tensor::new(vec![c, h, w], d2)?))
}

struct CostVolumeRule {
    cfg: MatchConfig,
}

impl<E: Element> BackwardRule<E> for CostVolumeRule {
    fn name(&self) -> &'static str {
        "cost_volume"
    }

    fn backward(&self, inputs: &[&Tensor<E>], _: &Tensor<E>, grad: &Tensor<E>, _: &[bool]) -> Result<Vec<Option<Tensor<E>>>> {
        let (d1, d2) = cost_volume_backward(inputs[0], inputs[1], grad, &self.cfg)?;
        Ok(vec![Some(d1), Some(d2)])
    }
}

impl<E: Element> Tape<E> {
    pub fn cost_volume(&mut self, f1: Var, f2: Var, cfg: MatchConfig) -> Result<Var> {
        let out = build_cost_volume(self.value(f1), self.value(f2), &cfg)?;
        Ok(self.push(out, vec![f1, f2], Box::new(CostVolumeRule { cfg })))
    }
}

/// Matching unit M at `level`: upsample the previous flow, warp the second
/// features with it, correlate, and add the filtered residual.
pub fn matching_unit<E: Element>(
    tape: &mut Tape<E>,
    weights: &ModelWeights<E>,
    cfg: &ModelConfig,
    level: usize,
    f1: Var,
    f2: Var,
    flow_prev: Option<Var>,
) -> Result<Var> {
    let (_, h, w) = tape.value(f1).dims3()?;
    let (up, warped) = match (flow_prev, arch::upconv_layer(level)) {
        (Some(prev), Some(layer)) => {
            let (pc, ph, pw) = tape.value(prev).dims3()?;
            if pc != 2 {
                return Err(Error::ShapeMismatch { op: "matching_unit", dim: "flow channels", expected: 2, actual: pc });
            }
            if 2 * ph != h {
                return Err(Error::ShapeMismatch { op: "matching_unit", dim: "prior flow height", expected: h / 2, actual: ph });
            }
            if 2 * pw != w {
                return Err(Error::ShapeMismatch { op: "matching_unit", dim: "prior flow width", expected: w / 2, actual: pw });
            }
            let wt = tape.param(&layer.weight_name(), weights.get(&layer.weight_name())?);
            let up = tape.deconv2d(prev, wt, layer.spec)?;
            tape.label(up, layer.name.clone());
            let warped = tape.f_warp(f2, up)?;
            tape.label(warped, format!("f-warp{level}_M"));
            (up, warped)
        }
        (None, None) => (tape.constant(Tensor::zeros(&[2, h, w])), f2),
        (Some(_), None) => {
            return Err(Error::InvalidArgument(format!("matching_unit: level {level} takes no prior flow")))
        }
        (None, Some(_)) => {
            return Err(Error::InvalidArgument(format!("matching_unit: level {level} requires a prior flow")))
        }
    };
    let volume = tape.cost_volume(f1, warped, cfg.match_config(level))?;
    tape.label(volume, format!("corr{level}_M"));
    let residual = run_stack(tape, weights, &arch::matcher_layers(cfg, level), volume, cfg.leaky_slope)?;
    let flow = tape.add(up, residual)?;
    tape.label(flow, format!("flow{level}_M"));
    Ok(flow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn correlate_cases() {
        let ones = vec![1.0f32; 128];
        assert_eq!(correlate(&ones, &ones).unwrap(), 1.0);
        assert_eq!(correlate(&[1.0f32, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(correlate(&[1.0f32], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn channel_counts() {
        assert_eq!(MatchConfig::dense(3).channels(), 49);
        let sparse = MatchConfig { radius: 6, displacement_stride: 2, sample_stride: 2 };
        assert_eq!(sparse.channels(), 49);
        assert_eq!(sparse.displacement(0), (-6, -6));
        assert_eq!(sparse.displacement(24), (0, 0));
        assert_eq!(sparse.displacement(25), (2, 0));
        assert!(MatchConfig { radius: 5, displacement_stride: 2, sample_stride: 1 }.validate().is_err());
    }

    #[test]
    fn self_match_peaks_at_zero_displacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut f = Tensor::<f64>::random_uniform(&[8, 6, 6], -1.0, 1.0, &mut rng);
        // unit-normalize every feature column
        for p in 0..36 {
            let n: f64 = (0..8).map(|c| f.data()[c * 36 + p].powi(2)).sum::<f64>().sqrt();
            for c in 0..8 {
                f.data_mut()[c * 36 + p] /= n;
            }
        }
        let cfg = MatchConfig::dense(3);
        let vol = build_cost_volume(&f, &f, &cfg).unwrap();
        for p in 0..36 {
            let zero = vol.data()[24 * 36 + p];
            assert!((zero - 1.0 / 8.0).abs() < 1e-12);
            for d in 0..49 {
                assert!(vol.data()[d * 36 + p] <= zero + 1e-12);
            }
        }
    }

    #[test]
    fn sampled_positions_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f1 = Tensor::<f32>::random_uniform(&[4, 8, 10], -1.0, 1.0, &mut rng);
        let f2 = Tensor::<f32>::random_uniform(&[4, 8, 10], -1.0, 1.0, &mut rng);
        let dense_cfg = MatchConfig { radius: 6, displacement_stride: 2, sample_stride: 1 };
        let sparse_cfg = MatchConfig { sample_stride: 2, ..dense_cfg };
        let dense = build_cost_volume(&f1, &f2, &dense_cfg).unwrap();
        let sparse = build_cost_volume(&f1, &f2, &sparse_cfg).unwrap();
        for d in 0..49 {
            for y in (0..8).step_by(2) {
                for x in (0..10).step_by(2) {
                    assert_eq!(sparse.at3(d, y, x), dense.at3(d, y, x));
                }
            }
        }
    }
}
