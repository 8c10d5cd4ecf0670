//! im2col-based convolution and its transpose.

use rayon::prelude::*;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Spatial stride of a convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stride {
    /// Ordinary stride-`s` convolution.
    By(usize),
    /// Fractionally strided (transposed) convolution doubling the extents.
    Half,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: Stride,
    pub pad_h: usize,
    pub pad_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    /// Square kernel with "same" padding (`pad = k / 2`).
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            kernel_h: kernel,
            kernel_w: kernel,
            stride: Stride::By(stride),
            pad_h: kernel / 2,
            pad_w: kernel / 2,
            in_channels,
            out_channels,
        }
    }

    /// 4×4, pad 1 transposed convolution: exact 2× upsampling.
    pub fn upconv(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            kernel_h: 4,
            kernel_w: 4,
            stride: Stride::Half,
            pad_h: 1,
            pad_w: 1,
            in_channels,
            out_channels,
        }
    }

    /// Weight tensor shape: `(out, in, kh, kw)` for convolution and
    /// `(in, out, kh, kw)` for the transposed form.
    pub fn weight_shape(&self) -> [usize; 4] {
        match self.stride {
            Stride::By(_) => [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w],
            Stride::Half => [self.in_channels, self.out_channels, self.kernel_h, self.kernel_w],
        }
    }

    pub fn has_bias(&self) -> bool {
        matches!(self.stride, Stride::By(_))
    }

    pub fn param_count(&self) -> usize {
        let w: usize = self.weight_shape().iter().product();
        w + if self.has_bias() { self.out_channels } else { 0 }
    }

    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match self.stride {
            Stride::By(s) => {
                if s == 0 {
                    return Err(Error::InvalidArgument("conv stride must be positive".into()));
                }
                let oh = (h + 2 * self.pad_h).checked_sub(self.kernel_h);
                let ow = (w + 2 * self.pad_w).checked_sub(self.kernel_w);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok((oh / s + 1, ow / s + 1)),
                    _ => Err(Error::shape("conv2d", "kernel larger than padded input")),
                }
            }
            Stride::Half => {
                if self.kernel_h != 2 * self.pad_h + 2 || self.kernel_w != 2 * self.pad_w + 2 {
                    return Err(Error::shape(
                        "deconv2d",
                        format!(
                            "kernel {}x{} with pad {}x{} does not double the extents",
                            self.kernel_h, self.kernel_w, self.pad_h, self.pad_w
                        ),
                    ));
                }
                Ok((2 * h, 2 * w))
            }
        }
    }

    fn step(&self) -> usize {
        match self.stride {
            Stride::By(s) => s,
            Stride::Half => 2,
        }
    }
}

/// Geometry of one (image, column-grid) pairing.
#[derive(Clone, Copy)]
struct Geometry {
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unrolls `w×w` windows into a `(c·kh·kw) × (oh·ow)` matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<E: Element>(
    input: &[E],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let g = Geometry { channels, h, w, kh, kw, stride, ph, pw, oh, ow };
    let mut col = vec![E::zero(); g.rows() * g.cols()];
    im2col_into(input, &g, &mut col);
    col
}

fn im2col_into<E: Element>(input: &[E], g: &Geometry, col: &mut [E]) {
    let ncols = g.cols();
    col.par_chunks_mut(ncols).enumerate().for_each(|(row, out)| {
        let c = row / (g.kh * g.kw);
        let ky = (row / g.kw) % g.kh;
        let kx = row % g.kw;
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for oy in 0..g.oh {
            let iy = (oy * g.stride + ky) as isize - g.ph as isize;
            let dst = &mut out[oy * g.ow..(oy + 1) * g.ow];
            if iy < 0 || iy >= g.h as isize {
                dst.fill(E::zero());
                continue;
            }
            let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
            for (ox, d) in dst.iter_mut().enumerate() {
                let ix = (ox * g.stride + kx) as isize - g.pw as isize;
                *d = if ix < 0 || ix >= g.w as isize { E::zero() } else { src[ix as usize] };
            }
        }
    });
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into an image.
#[allow(clippy::too_many_arguments)]
pub fn col2im<E: Element>(
    col: &[E],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let g = Geometry { channels, h, w, kh, kw, stride, ph, pw, oh, ow };
    col2im_from(col, &g)
}

fn col2im_from<E: Element>(col: &[E], g: &Geometry) -> Vec<E> {
    let mut img = vec![E::zero(); g.channels * g.h * g.w];
    let ncols = g.cols();
    let per_channel = g.kh * g.kw * ncols;
    img.par_chunks_mut(g.h * g.w).enumerate().for_each(|(c, plane)| {
        let rows = &col[c * per_channel..(c + 1) * per_channel];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &rows[(ky * g.kw + kx) * ncols..(ky * g.kw + kx + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pw as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    });
    img
}

/// Row-major `c (m×n) = a (m×k) · b (k×n)`, split over row blocks.
#[allow(clippy::too_many_arguments)]
fn matmul<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    rsa: usize,
    csa: usize,
    b: &[E],
    rsb: usize,
    csb: usize,
    c: &mut [E],
) {
    let threads = rayon::current_num_threads().max(1);
    let rows_per = if threads == 1 || m * n * k < 1 << 16 { m } else { m.div_ceil(threads) };
    c.par_chunks_mut(rows_per * n).enumerate().for_each(|(i, chunk)| {
        let r0 = i * rows_per;
        let rows = chunk.len() / n;
        E::gemm(
            rows,
            k,
            n,
            E::one(),
            &a[r0 * rsa..],
            rsa as isize,
            csa as isize,
            b,
            rsb as isize,
            csb as isize,
            E::zero(),
            chunk,
            n as isize,
            1,
        );
    });
}

fn check_weight<E: Element>(weights: &Tensor<E>, spec: &ConvSpec, op: &'static str) -> Result<()> {
    let expected = spec.weight_shape();
    let ws = weights.shape();
    if ws.len() != 4 {
        return Err(Error::shape(op, format!("weights must be rank 4, got {ws:?}")));
    }
    for (i, name) in ["dim0", "dim1", "kernel_h", "kernel_w"].into_iter().enumerate() {
        if ws[i] != expected[i] {
            let dim = match (i, spec.stride) {
                (0, Stride::By(_)) | (1, Stride::Half) => "out_channels",
                (0, Stride::Half) | (1, Stride::By(_)) => "in_channels",
                _ => name,
            };
            return Err(Error::ShapeMismatch { op, dim, expected: expected[i], actual: ws[i] });
        }
    }
    Ok(())
}

fn conv_geometry<E: Element>(input: &Tensor<E>, spec: &ConvSpec, op: &'static str) -> Result<Geometry> {
    let (c, h, w) = input.dims3()?;
    if c != spec.in_channels {
        return Err(Error::ShapeMismatch { op, dim: "in_channels", expected: spec.in_channels, actual: c });
    }
    let (oh, ow) = spec.output_extent(h, w)?;
    Ok(Geometry {
        channels: c,
        h,
        w,
        kh: spec.kernel_h,
        kw: spec.kernel_w,
        stride: spec.step(),
        ph: spec.pad_h,
        pw: spec.pad_w,
        oh,
        ow,
    })
}

/// Cross-correlation `out[o] = Σ w[o,i,ky,kx]·x[i, s·y+ky−p, s·x+kx−p] + b[o]`.
pub fn conv2d<E: Element>(
    input: &Tensor<E>,
    weights: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    spec: &ConvSpec,
) -> Result<Tensor<E>> {
    if spec.stride == Stride::Half {
        return Err(Error::InvalidArgument("conv2d: use deconv2d for stride 1/2".into()));
    }
    let g = conv_geometry(input, spec, "conv2d")?;
    check_weight(weights, spec, "conv2d")?;
    let (k, p) = (g.rows(), g.cols());
    let out_ch = spec.out_channels;
    let mut out = vec![E::zero(); out_ch * p];
    if g.kh == 1 && g.kw == 1 && g.stride == 1 && g.ph == 0 && g.pw == 0 {
        matmul(out_ch, k, p, weights.data(), k, 1, input.data(), p, 1, &mut out);
    } else {
        let mut col = vec![E::zero(); k * p];
        im2col_into(input.data(), &g, &mut col);
        matmul(out_ch, k, p, weights.data(), k, 1, &col, p, 1, &mut out);
    }
    if let Some(b) = bias {
        if b.numel() != out_ch {
            return Err(Error::ShapeMismatch { op: "conv2d", dim: "bias", expected: out_ch, actual: b.numel() });
        }
        for (o, plane) in out.chunks_mut(p).enumerate() {
            let bo = b.data()[o];
            plane.iter_mut().for_each(|v| *v = *v + bo);
        }
    }
    Tensor::new(vec![out_ch, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`]: `(d_input, d_weights, d_bias)`; `d_input` is
/// skipped when `need_input` is false.
pub fn conv2d_backward<E: Element>(
    input: &Tensor<E>,
    weights: &Tensor<E>,
    grad_out: &Tensor<E>,
    spec: &ConvSpec,
    need_input: bool,
) -> Result<(Option<Tensor<E>>, Tensor<E>, Tensor<E>)> {
    let g = conv_geometry(input, spec, "conv2d_backward")?;
    let (k, p) = (g.rows(), g.cols());
    let out_ch = spec.out_channels;
    let gy = grad_out.data();
    let col = im2col(input.data(), g.channels, g.h, g.w, g.kh, g.kw, g.stride, g.ph, g.pw, g.oh, g.ow);

    // dW (O×K) = dY (O×P) · colᵀ (P×K)
    let mut dw = vec![E::zero(); out_ch * k];
    matmul(out_ch, p, k, gy, p, 1, &col, 1, p, &mut dw);
    let db: Vec<E> = gy.chunks(p).map(|plane| plane.iter().copied().sum()).collect();

    let dx = if need_input {
        // dcol (K×P) = Wᵀ (K×O) · dY (O×P)
        let mut dcol = vec![E::zero(); k * p];
        matmul(k, out_ch, p, weights.data(), 1, k, gy, p, 1, &mut dcol);
        Some(Tensor::new(input.shape().to_vec(), col2im_from(&dcol, &g))?)
    } else {
        None
    };
    Ok((dx, Tensor::new(weights.shape().to_vec(), dw)?, Tensor::new(vec![out_ch], db)?))
}

fn deconv_geometry<E: Element>(input: &Tensor<E>, spec: &ConvSpec) -> Result<Geometry> {
    if spec.stride != Stride::Half {
        return Err(Error::InvalidArgument("deconv2d: spec must use stride 1/2".into()));
    }
    let (c, h, w) = input.dims3()?;
    if c != spec.in_channels {
        return Err(Error::ShapeMismatch {
            op: "deconv2d",
            dim: "in_channels",
            expected: spec.in_channels,
            actual: c,
        });
    }
    let (oh, ow) = spec.output_extent(h, w)?;
    // The transposed conv is the adjoint of a stride-2 conv mapping (oh, ow)
    // down to (h, w); the geometry describes that forward conv.
    Ok(Geometry {
        channels: spec.out_channels,
        h: oh,
        w: ow,
        kh: spec.kernel_h,
        kw: spec.kernel_w,
        stride: 2,
        ph: spec.pad_h,
        pw: spec.pad_w,
        oh: h,
        ow: w,
    })
}

/// Fractionally strided convolution (no bias); output extents are exactly 2×.
pub fn deconv2d<E: Element>(input: &Tensor<E>, weights: &Tensor<E>, spec: &ConvSpec) -> Result<Tensor<E>> {
    let g = deconv_geometry(input, spec)?;
    check_weight(weights, spec, "deconv2d")?;
    let (k, p) = (g.rows(), g.cols());
    let cin = spec.in_channels;
    // col (K×P) = Wᵀ (K×Cin) · x (Cin×P), with W stored (Cin, K)
    let mut col = vec![E::zero(); k * p];
    matmul(k, cin, p, weights.data(), 1, k, input.data(), p, 1, &mut col);
    Tensor::new(vec![spec.out_channels, g.h, g.w], col2im_from(&col, &g))
}

/// Gradients of [`deconv2d`]: `(d_input, d_weights)`.
pub fn deconv2d_backward<E: Element>(
    input: &Tensor<E>,
    weights: &Tensor<E>,
    grad_out: &Tensor<E>,
    spec: &ConvSpec,
    need_input: bool,
) -> Result<(Option<Tensor<E>>, Tensor<E>)> {
    let g = deconv_geometry(input, spec)?;
    let (k, p) = (g.rows(), g.cols());
    let cin = spec.in_channels;
    let gcol = im2col(grad_out.data(), g.channels, g.h, g.w, g.kh, g.kw, g.stride, g.ph, g.pw, g.oh, g.ow);
    // dW (Cin×K) = x (Cin×P) · gcolᵀ (P×K)
    let mut dw = vec![E::zero(); cin * k];
    matmul(cin, p, k, input.data(), p, 1, &gcol, 1, p, &mut dw);
    let dx = if need_input {
        let mut dx = vec![E::zero(); cin * p];
        matmul(cin, k, p, weights.data(), k, 1, &gcol, p, 1, &mut dx);
        Some(Tensor::new(input.shape().to_vec(), dx)?)
    } else {
        None
    };
    Ok((dx, Tensor::new(weights.shape().to_vec(), dw)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_1x1() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::random_uniform(&[3, 4, 5], -1.0, 1.0, &mut rng);
        let spec = ConvSpec::same(3, 3, 1, 1);
        let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let b = Tensor::zeros(&[3]);
        assert_eq!(conv2d(&x, &w, Some(&b), &spec).unwrap(), x);
    }

    #[test]
    fn conv1_shape() {
        let x = Tensor::<f32>::zeros(&[3, 64, 64]);
        let spec = ConvSpec::same(3, 32, 7, 1);
        let w = Tensor::zeros(&spec.weight_shape());
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), &[32, 64, 64]);
    }

    #[test]
    fn stride_two_halves() {
        let x = Tensor::<f32>::zeros(&[4, 16, 12]);
        let spec = ConvSpec::same(4, 8, 3, 2);
        let w = Tensor::zeros(&spec.weight_shape());
        assert_eq!(conv2d(&x, &w, None, &spec).unwrap().shape(), &[8, 8, 6]);
    }

    #[test]
    fn channel_mismatch_names_dimension() {
        let x = Tensor::<f32>::zeros(&[2, 4, 4]);
        let spec = ConvSpec::same(3, 1, 3, 1);
        let w = Tensor::zeros(&spec.weight_shape());
        match conv2d(&x, &w, None, &spec) {
            Err(Error::ShapeMismatch { dim, .. }) => assert_eq!(dim, "in_channels"),
            other => panic!("unexpected {other:?}"),
        }
        let spec = ConvSpec::same(2, 1, 3, 1);
        let w = Tensor::zeros(&[1, 2, 5, 5]);
        match conv2d(&x, &w, None, &spec) {
            Err(Error::ShapeMismatch { dim, .. }) => assert_eq!(dim, "kernel_h"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn deconv_doubles_and_rejects_bad_pad() {
        let x = Tensor::<f32>::zeros(&[2, 4, 4]);
        let spec = ConvSpec::upconv(2, 2);
        let w = Tensor::zeros(&spec.weight_shape());
        let y = deconv2d(&x, &w, &spec).unwrap();
        assert_eq!(y.shape(), &[2, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));

        let bad = ConvSpec { pad_h: 0, pad_w: 0, ..spec };
        assert!(deconv2d(&x, &w, &bad).is_err());
    }
}
