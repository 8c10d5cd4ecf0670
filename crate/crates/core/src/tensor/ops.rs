//! Element-wise and per-column operators on `(C, H, W)` tensors.

use super::{Element, Tensor};
use crate::error::{Error, Result};

pub fn leaky_relu<E: Element>(input: &Tensor<E>, slope: E) -> Tensor<E> {
    input.map(|x| if x >= E::zero() { x } else { slope * x })
}

/// Right-continuous derivative: 1 on `x >= 0`.
pub fn leaky_relu_backward<E: Element>(input: &Tensor<E>, grad: &Tensor<E>, slope: E) -> Tensor<E> {
    input
        .zip_map(grad, "leaky_relu_backward", |x, g| if x >= E::zero() { g } else { slope * g })
        .expect("grad matches input shape")
}

pub fn negative_square<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    input.map(|x| -(x * x))
}

/// Softmax over the channel axis at every spatial position.
pub fn channel_softmax<E: Element>(input: &Tensor<E>) -> Result<Tensor<E>> {
    let (c, h, w) = input.dims3()?;
    let plane = h * w;
    let x = input.data();
    let mut out = vec![E::zero(); x.len()];
    for p in 0..plane {
        let mut max = x[p];
        for ch in 1..c {
            max = max.max(x[ch * plane + p]);
        }
        let mut total = E::zero();
        for ch in 0..c {
            let e = (x[ch * plane + p] - max).exp();
            out[ch * plane + p] = e;
            total = total + e;
        }
        for ch in 0..c {
            out[ch * plane + p] = out[ch * plane + p] / total;
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// `dx_c = y_c (g_c − Σ_k g_k y_k)` given the softmax output `y`.
pub fn channel_softmax_backward<E: Element>(output: &Tensor<E>, grad: &Tensor<E>) -> Result<Tensor<E>> {
    let (c, h, w) = output.dims3()?;
    let plane = h * w;
    let (y, g) = (output.data(), grad.data());
    let mut dx = vec![E::zero(); y.len()];
    for p in 0..plane {
        let mut dot = E::zero();
        for ch in 0..c {
            dot = dot + y[ch * plane + p] * g[ch * plane + p];
        }
        for ch in 0..c {
            let i = ch * plane + p;
            dx[i] = y[i] * (g[i] - dot);
        }
    }
    Tensor::new(output.shape().to_vec(), dx)
}

/// Folds each `window×window` zero-padded neighborhood into a trailing column
/// axis: output shape `(C, H, W, window²)`, column index `dy·window + dx`.
pub fn fold_patches<E: Element>(input: &Tensor<E>, window: usize) -> Result<Tensor<E>> {
    if window % 2 == 0 {
        return Err(Error::InvalidArgument(format!("fold_patches: window must be odd, got {window}")));
    }
    let (c, h, w) = input.dims3()?;
    let taps = window * window;
    let half = (window / 2) as isize;
    let mut out = vec![E::zero(); c * h * w * taps];
    for ch in 0..c {
        let plane = input.channel(ch);
        for y in 0..h {
            for x in 0..w {
                let base = ((ch * h + y) * w + x) * taps;
                for dy in 0..window {
                    let sy = y as isize + dy as isize - half;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..window {
                        let sx = x as isize + dx as isize - half;
                        if sx >= 0 && sx < w as isize {
                            out[base + dy * window + dx] = plane[sy as usize * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w, taps], out)
}

pub fn concat_channels<E: Element>(parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let (_, h, w) = first.dims3()?;
    let mut data = Vec::new();
    let mut channels = 0;
    for t in parts {
        t.expect_same_extent(first, "concat")?;
        channels += t.dims3()?.0;
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![channels, h, w], data)
}

/// 2×2 average pooling with stride 2.
pub fn avg_pool2x<E: Element>(input: &Tensor<E>) -> Result<Tensor<E>> {
    let (c, h, w) = input.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("avg_pool2x", format!("extents {h}x{w} are not even")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = E::lit(0.25);
    let out = Tensor::from_fn(&[c, oh, ow], |i| {
        let ch = i / (oh * ow);
        let y = (i / ow) % oh;
        let x = i % ow;
        let p = input.channel(ch);
        let r0 = 2 * y * w + 2 * x;
        (p[r0] + p[r0 + 1] + p[r0 + w] + p[r0 + w + 1]) * quarter
    });
    Ok(out)
}

/// Source index pair and weight of the upper neighbor for each of `2n`
/// output positions (half-pixel centers, clamped at the border).
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            if src <= 0.0 {
                return (0, 0, 0.0);
            }
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - src.floor())
        })
        .collect()
}

/// Bilinear 2× upsampling; constant fields are reproduced exactly.
pub fn upsample2x_bilinear<E: Element>(input: &Tensor<E>) -> Result<Tensor<E>> {
    let (c, h, w) = input.dims3()?;
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let lerp = |a: E, b: E, t: f64| a + (b - a) * E::lit(t);
    Ok(Tensor::from_fn(&[c, oh, ow], |i| {
        let ch = i / (oh * ow);
        let (y0, y1, fy) = ty[(i / ow) % oh];
        let (x0, x1, fx) = tx[i % ow];
        let p = input.channel(ch);
        let top = lerp(p[y0 * w + x0], p[y0 * w + x1], fx);
        let bot = lerp(p[y1 * w + x0], p[y1 * w + x1], fx);
        lerp(top, bot, fy)
    }))
}

pub fn upsample2x_bilinear_backward<E: Element>(grad: &Tensor<E>, in_h: usize, in_w: usize) -> Result<Tensor<E>> {
    let (c, oh, ow) = grad.dims3()?;
    if oh != 2 * in_h || ow != 2 * in_w {
        return Err(Error::shape("upsample2x_backward", "gradient extents are not 2x the input"));
    }
    let ty = upsample_taps(in_h);
    let tx = upsample_taps(in_w);
    let mut dx = vec![E::zero(); c * in_h * in_w];
    for ch in 0..c {
        let g = grad.channel(ch);
        let d = &mut dx[ch * in_h * in_w..(ch + 1) * in_h * in_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                let (fy, fx) = (E::lit(fy), E::lit(fx));
                let one = E::one();
                d[y0 * in_w + x0] = d[y0 * in_w + x0] + v * (one - fy) * (one - fx);
                d[y0 * in_w + x1] = d[y0 * in_w + x1] + v * (one - fy) * fx;
                d[y1 * in_w + x0] = d[y1 * in_w + x0] + v * fy * (one - fx);
                d[y1 * in_w + x1] = d[y1 * in_w + x1] + v * fy * fx;
            }
        }
    }
    Tensor::new(vec![c, in_h, in_w], dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::<f32>::new(vec![2], vec![3.0, -2.0]).unwrap();
        let y = leaky_relu(&x, 0.1);
        assert_eq!(y.data()[0], 3.0);
        assert!((y.data()[1] + 0.2).abs() < 1e-7);
    }

    #[test]
    fn negative_square_values() {
        let x = Tensor::<f32>::new(vec![3], vec![3.0, -3.0, 0.0]).unwrap();
        assert_eq!(negative_square(&x).data(), &[-9.0, -9.0, -0.0]);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let x = Tensor::<f32>::full(&[9, 2, 2], 0.7);
        let y = channel_softmax(&x).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-7));

        let mut x = Tensor::<f32>::zeros(&[4, 1, 1]);
        x.data_mut()[2] = 1000.0;
        let y = channel_softmax(&x).unwrap();
        assert!(y.is_finite());
        assert!((y.data()[2] - 1.0).abs() < 1e-7);
        assert!(y.data()[0] < 1e-30);
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::random_uniform(&[7, 5, 6], -20.0, 20.0, &mut rng);
        let y = channel_softmax(&x).unwrap();
        for p in 0..30 {
            let s: f32 = (0..7).map(|c| y.data()[c * 30 + p]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn fold_window_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f32>::random_uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
        let f = fold_patches(&x, 1).unwrap();
        assert_eq!(f.shape(), &[2, 3, 4, 1]);
        assert_eq!(f.data(), x.data());
    }

    #[test]
    fn fold_constant_interior_and_even_window() {
        let x = Tensor::<f32>::full(&[1, 5, 5], 2.5);
        let f = fold_patches(&x, 3).unwrap();
        let base = (2 * 5 + 2) * 9;
        assert!(f.data()[base..base + 9].iter().all(|&v| v == 2.5));
        // the corner column carries zero padding
        assert_eq!(f.data()[0], 0.0);
        assert!(fold_patches(&x, 4).is_err());
    }

    #[test]
    fn avg_pool_checkerboard() {
        let x = Tensor::<f32>::from_fn(&[3, 2, 2], |i| ((i % 2) ^ ((i / 2) % 2)) as f32);
        let y = avg_pool2x(&x).unwrap();
        assert_eq!(y.shape(), &[3, 1, 1]);
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn upsample_constant_exact() {
        let x = Tensor::<f32>::full(&[2, 3, 5], 0.37);
        let y = upsample2x_bilinear(&x).unwrap();
        assert_eq!(y.shape(), &[2, 6, 10]);
        assert!(y.data().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::random_uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
        let g = Tensor::<f64>::random_uniform(&[2, 6, 8], -1.0, 1.0, &mut rng);
        let lhs = upsample2x_bilinear(&x).unwrap().dot(&g).unwrap();
        let rhs = x.dot(&upsample2x_bilinear_backward(&g, 3, 4).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
