//! Direct loop implementations used as oracles by the integration tests.
#![allow(dead_code)]

use lfn_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::random_uniform(shape, -1.0, 1.0, &mut rng(seed))
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn idx(c: usize, y: usize, x: usize, h: usize, w: usize) -> usize {
    (c * h + y) * w + x
}

/// Cross-correlation with zero padding, weights `(out, in, kh, kw)`.
pub fn conv(input: &Tensor<f64>, weights: &Tensor<f64>, bias: Option<&[f64]>, stride: usize, pad: usize) -> Tensor<f64> {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, kh, kw) = (weights.shape()[0], weights.shape()[2], weights.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let x = input.data();
    let k = weights.data();
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for i in 0..ci {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            acc += k[((o * ci + i) * kh + ky) * kw + kx] * x[idx(i, y as usize, xx as usize, h, w)];
                        }
                    }
                }
                out[idx(o, oy, ox, oh, ow)] = acc;
            }
        }
    }
    Tensor::new(vec![co, oh, ow], out).unwrap()
}

/// Transposed convolution by scattering: every input pixel adds its kernel
/// at `2·(y, x) − pad`. Weights `(in, out, kh, kw)`.
pub fn deconv(input: &Tensor<f64>, weights: &Tensor<f64>, pad: usize) -> Tensor<f64> {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, kh, kw) = (weights.shape()[1], weights.shape()[2], weights.shape()[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; co * oh * ow];
    for i in 0..ci {
        for y in 0..h {
            for x in 0..w {
                let v = input.data()[idx(i, y, x, h, w)];
                for o in 0..co {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let oy = (2 * y + ky) as isize - pad as isize;
                            let ox = (2 * x + kx) as isize - pad as isize;
                            if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                continue;
                            }
                            out[idx(o, oy as usize, ox as usize, oh, ow)] +=
                                v * weights.data()[((i * co + o) * kh + ky) * kw + kx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, oh, ow], out).unwrap()
}

/// Bilinear sample of channel `c` at real coordinates, zero outside.
pub fn sample(f: &Tensor<f64>, c: usize, xs: f64, ys: f64) -> f64 {
    let (h, w) = (f.shape()[1] as isize, f.shape()[2] as isize);
    let (x0, y0) = (xs.floor() as isize, ys.floor() as isize);
    let mut acc = 0.0;
    for (xi, yi) in [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)] {
        if xi < 0 || yi < 0 || xi >= w || yi >= h {
            continue;
        }
        let wt = (1.0 - (xs - xi as f64).abs()) * (1.0 - (ys - yi as f64).abs());
        acc += wt * f.data()[idx(c, yi as usize, xi as usize, h as usize, w as usize)];
    }
    acc
}

pub fn warp(f: &Tensor<f64>, flow: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let u = flow.data()[idx(0, y, x, h, w)];
        let v = flow.data()[idx(1, y, x, h, w)];
        sample(f, ch, x as f64 + u, y as f64 + v)
    })
}

/// `Σ_c f1[c,y,x]·f2[c,y+dy,x+dx] / C`, zero when the target is outside.
pub fn cost(f1: &Tensor<f64>, f2: &Tensor<f64>, y: usize, x: usize, dx: isize, dy: isize) -> f64 {
    let (c, h, w) = (f1.shape()[0], f1.shape()[1], f1.shape()[2]);
    let (ty, tx) = (y as isize + dy, x as isize + dx);
    if ty < 0 || tx < 0 || ty >= h as isize || tx >= w as isize {
        return 0.0;
    }
    let mut acc = 0.0;
    for ch in 0..c {
        acc += f1.data()[idx(ch, y, x, h, w)] * f2.data()[idx(ch, ty as usize, tx as usize, h, w)];
    }
    acc / c as f64
}

/// Displacements of a `(2R/ds + 1)²` tap grid, row-major in `(dy, dx)`.
pub fn displacements(radius: usize, stride: usize) -> Vec<(isize, isize)> {
    let r = (radius / stride) as isize;
    let s = stride as isize;
    let mut out = Vec::new();
    for iy in -r..=r {
        for ix in -r..=r {
            out.push((ix * s, iy * s));
        }
    }
    out
}

pub fn dense_volume(f1: &Tensor<f64>, f2: &Tensor<f64>, radius: usize, stride: usize) -> Tensor<f64> {
    let (h, w) = (f1.shape()[1], f1.shape()[2]);
    let disp = displacements(radius, stride);
    Tensor::from_fn(&[disp.len(), h, w], |i| {
        let (d, y, x) = (i / (h * w), (i / w) % h, i % w);
        cost(f1, f2, y, x, disp[d].0, disp[d].1)
    })
}

/// Local convolution by sliding a `w×w` window over the zero-padded flow;
/// filter channel `j` weights the offset `(j / w − r, j % w − r)`.
pub fn sliding_lconv(flow: &Tensor<f64>, filters: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = (flow.shape()[0], flow.shape()[1], flow.shape()[2]);
    let taps = filters.shape()[0];
    let win = (taps as f64).sqrt() as usize;
    let r = (win / 2) as isize;
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let mut acc = 0.0;
        for j in 0..taps {
            let yy = y as isize + (j / win) as isize - r;
            let xx = x as isize + (j % win) as isize - r;
            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                continue;
            }
            acc += filters.data()[idx(j, y, x, h, w)] * flow.data()[idx(ch, yy as usize, xx as usize, h, w)];
        }
        acc
    })
}

/// `g_i = exp(−D_i²) / Σ_j exp(−D_j²)` per position.
pub fn direct_filters(d: &Tensor<f64>) -> Tensor<f64> {
    let (n, h, w) = (d.shape()[0], d.shape()[1], d.shape()[2]);
    Tensor::from_fn(&[n, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        let num = (-d.data()[c * h * w + p].powi(2)).exp();
        let den: f64 = (0..n).map(|j| (-d.data()[j * h * w + p].powi(2)).exp()).sum();
        num / den
    })
}

/// Mean end-point error over all pixels of two `(2, H, W)` fields.
pub fn aee(est: &[f32], gt: &[f32], plane: usize) -> f64 {
    (0..plane)
        .map(|p| {
            let du = (est[p] - gt[p]) as f64;
            let dv = (est[plane + p] - gt[plane + p]) as f64;
            (du * du + dv * dv).sqrt()
        })
        .sum::<f64>()
        / plane as f64
}
