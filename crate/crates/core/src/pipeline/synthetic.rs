//! Synthetic training pairs with exact ground truth.
//!
//! Each sample draws a smooth random texture `T` (multi-octave value noise,
//! evaluated at continuous coordinates) and a translation `t` uniform in the
//! disk of radius `max_displacement`. Then `im1(x) = T(x)`, `im2(x) = T(x − t)`
//! and the ground-truth flow is `t` everywhere. In piecewise mode a
//! rectangular foreground with its own texture moves by a second translation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{check_extents, ImagePair};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::warp::FlowField;

#[derive(Clone, Debug)]
pub struct TrainSample {
    pub pair: ImagePair<f32>,
    pub flow: FlowField<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticOptions {
    pub count: usize,
    pub size: usize,
    pub max_displacement: f64,
    pub piecewise: bool,
    pub seed: u64,
}

/// (cell size in pixels, amplitude) per octave.
const OCTAVES: [(f64, f64); 3] = [(12.0, 0.5), (6.0, 0.3), (3.0, 0.2)];

struct Lattice {
    cell: f64,
    amplitude: f64,
    origin: i64,
    n: usize,
    values: Vec<f64>,
}

impl Lattice {
    fn sample(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = (x / self.cell, y / self.cell);
        let (fx, fy) = (gx.floor(), gy.floor());
        let fade = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (fade(gx - fx), fade(gy - fy));
        let ix = (fx as i64 - self.origin) as usize;
        let iy = (fy as i64 - self.origin) as usize;
        let at = |i: usize, j: usize| self.values[j * self.n + i];
        let top = at(ix, iy) + (at(ix + 1, iy) - at(ix, iy)) * tx;
        let bot = at(ix, iy + 1) + (at(ix + 1, iy + 1) - at(ix, iy + 1)) * tx;
        self.amplitude * (top + (bot - top) * ty)
    }
}

/// Three-channel texture defined on `[-margin, size + margin]²`.
struct Texture {
    channels: Vec<Vec<Lattice>>,
}

impl Texture {
    fn new(size: usize, margin: f64, rng: &mut impl Rng) -> Self {
        let channels = (0..3)
            .map(|_| {
                OCTAVES
                    .iter()
                    .map(|&(cell, amplitude)| {
                        let origin = (-margin / cell).floor() as i64 - 1;
                        let last = ((size as f64 + margin) / cell).ceil() as i64 + 1;
                        let n = (last - origin + 1) as usize;
                        let values = (0..n * n).map(|_| rng.random::<f64>()).collect();
                        Lattice { cell, amplitude, origin, n, values }
                    })
                    .collect()
            })
            .collect();
        Texture { channels }
    }

    fn sample(&self, c: usize, x: f64, y: f64) -> f64 {
        self.channels[c].iter().map(|l| l.sample(x, y)).sum()
    }
}

fn random_translation(rng: &mut impl Rng, radius: f64) -> (f64, f64) {
    let r = radius * rng.random::<f64>().sqrt();
    let theta = rng.random::<f64>() * std::f64::consts::TAU;
    (r * theta.cos(), r * theta.sin())
}

fn render(size: usize, mut f: impl FnMut(usize, f64, f64) -> f64) -> Tensor<f32> {
    let plane = size * size;
    Tensor::from_fn(&[3, size, size], |i| {
        let p = i % plane;
        f(i / plane, (p % size) as f64, (p / size) as f64) as f32
    })
}

fn sample_one(opts: &SyntheticOptions, rng: &mut impl Rng) -> Result<TrainSample> {
    let size = opts.size;
    let margin = opts.max_displacement + 2.0;
    let background = Texture::new(size, margin, rng);
    let t = random_translation(rng, opts.max_displacement);
    if !opts.piecewise {
        let im1 = render(size, |c, x, y| background.sample(c, x, y));
        let im2 = render(size, |c, x, y| background.sample(c, x - t.0, y - t.1));
        let flow = FlowField::constant(size, size, t.0 as f32, t.1 as f32);
        return Ok(TrainSample { pair: ImagePair::new(im1, im2)?, flow });
    }
    let foreground = Texture::new(size, margin, rng);
    let t2 = random_translation(rng, opts.max_displacement);
    let s = size as f64;
    let (w, h) = (rng.random_range(0.25 * s..0.5 * s), rng.random_range(0.25 * s..0.5 * s));
    let (x0, y0) = (rng.random_range(0.0..s - w), rng.random_range(0.0..s - h));
    let inside = |x: f64, y: f64| x >= x0 && x < x0 + w && y >= y0 && y < y0 + h;
    let im1 = render(size, |c, x, y| {
        if inside(x, y) {
            foreground.sample(c, x, y)
        } else {
            background.sample(c, x, y)
        }
    });
    let im2 = render(size, |c, x, y| {
        if inside(x - t2.0, y - t2.1) {
            foreground.sample(c, x - t2.0, y - t2.1)
        } else {
            background.sample(c, x - t.0, y - t.1)
        }
    });
    let plane = size * size;
    let flow = Tensor::from_fn(&[2, size, size], |i| {
        let p = i % plane;
        let fg = inside((p % size) as f64, (p / size) as f64);
        let (u, v) = if fg { t2 } else { t };
        (if i < plane { u } else { v }) as f32
    });
    Ok(TrainSample { pair: ImagePair::new(im1, im2)?, flow: FlowField::new(flow)? })
}

/// Deterministic in `opts.seed`.
pub fn make_synthetic_dataset(opts: &SyntheticOptions) -> Result<Vec<TrainSample>> {
    check_extents(opts.size, opts.size)?;
    if !(opts.max_displacement.is_finite() && opts.max_displacement >= 0.0) {
        return Err(Error::InvalidArgument(format!("max displacement {} must be non-negative", opts.max_displacement)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    (0..opts.count).map(|_| sample_one(opts, &mut rng)).collect()
}
