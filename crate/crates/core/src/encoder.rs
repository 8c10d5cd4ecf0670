//! Pyramidal feature encoder shared by both images of a pair.

use crate::error::{Error, Result};
use crate::pipeline::arch::{self, run_stack};
use crate::pipeline::config::PYRAMID_LEVELS;
use crate::pipeline::{ModelConfig, ModelWeights};
use crate::tensor::{avg_pool2x, Element, Tape, Tensor, Var};

/// Input extents must be multiples of this so that level 6 exists.
pub const SIZE_MULTIPLE: usize = 1 << (PYRAMID_LEVELS - 1);

/// Two RGB images with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair<E: Element = f32> {
    pub first: Tensor<E>,
    pub second: Tensor<E>,
}

impl<E: Element> ImagePair<E> {
    pub fn new(first: Tensor<E>, second: Tensor<E>) -> Result<Self> {
        for img in [&first, &second] {
            let (c, _, _) = img.dims3()?;
            if c != 3 {
                return Err(Error::ShapeMismatch { op: "image pair", dim: "channels", expected: 3, actual: c });
            }
            img.validate("image")?;
        }
        first.expect_same_extent(&second, "image pair")?;
        check_extents(first.shape()[1], first.shape()[2])?;
        Ok(ImagePair { first, second })
    }

    pub fn height(&self) -> usize {
        self.first.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.first.shape()[2]
    }
}

pub fn check_extents(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
        return Err(Error::shape(
            "encoder",
            format!("input {w}x{h} is not a multiple of {SIZE_MULTIPLE} in both extents; pad the images (e.g. --pad)"),
        ));
    }
    Ok(())
}

/// Grows a `(C, H, W)` image to the next multiple of [`SIZE_MULTIPLE`] in
/// both extents by repeating its last row and column.
pub fn pad_to_multiple<E: Element>(image: &Tensor<E>) -> Result<Tensor<E>> {
    let (c, h, w) = image.dims3()?;
    if h == 0 || w == 0 {
        return Err(Error::shape("pad", format!("cannot pad an empty {w}x{h} image")));
    }
    let (ph, pw) = (h.next_multiple_of(SIZE_MULTIPLE), w.next_multiple_of(SIZE_MULTIPLE));
    Ok(Tensor::from_fn(&[c, ph, pw], |i| {
        let (ch, y, x) = (i / (ph * pw), (i / pw) % ph, i % pw);
        image.data()[(ch * h + y.min(h - 1)) * w + x.min(w - 1)]
    }))
}

/// Six feature maps, level 1 (full resolution) first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<E: Element = f32> {
    pub levels: Vec<Tensor<E>>,
}

impl<E: Element> FeaturePyramid<E> {
    /// Features at pyramid level `k` (1..=6).
    pub fn level(&self, k: usize) -> &Tensor<E> {
        &self.levels[k - 1]
    }
}

/// Image at pyramid level `k` by repeated 2× average pooling.
pub fn downsample_image<E: Element>(image: &Tensor<E>, level: usize) -> Result<Tensor<E>> {
    if !(1..=PYRAMID_LEVELS).contains(&level) {
        return Err(Error::InvalidArgument(format!("pyramid level {level} outside 1..={PYRAMID_LEVELS}")));
    }
    let mut out = image.clone();
    for _ in 1..level {
        out = avg_pool2x(&out)?;
    }
    Ok(out)
}

/// Encoder input: the image, optionally with each channel's mean removed.
pub fn normalize_input<E: Element>(image: &Tensor<E>, mean_subtract: bool) -> Result<Tensor<E>> {
    if !mean_subtract {
        return Ok(image.clone());
    }
    let (_, h, w) = image.dims3()?;
    let plane = h * w;
    let means: Vec<E> = image
        .data()
        .chunks(plane)
        .map(|c| c.iter().copied().sum::<E>() / E::lit(plane as f64))
        .collect();
    Ok(Tensor::from_fn(image.shape(), |i| image.data()[i] - means[i / plane]))
}

/// Runs the encoder on the tape; returns the six level outputs.
pub fn encode<E: Element>(tape: &mut Tape<E>, weights: &ModelWeights<E>, cfg: &ModelConfig, image: Var) -> Result<Vec<Var>> {
    let (c, h, w) = tape.value(image).dims3()?;
    if c != 3 {
        return Err(Error::ShapeMismatch { op: "encoder", dim: "channels", expected: 3, actual: c });
    }
    check_extents(h, w)?;
    let mut x = image;
    let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
    for layers in arch::encoder_layers(cfg) {
        x = run_stack(tape, weights, &layers, x, cfg.leaky_slope)?;
        levels.push(x);
    }
    Ok(levels)
}

/// Feature pyramid of a single `[0, 1]` image.
pub fn build_pyramid<E: Element>(image: &Tensor<E>, weights: &ModelWeights<E>, cfg: &ModelConfig) -> Result<FeaturePyramid<E>> {
    let mut tape = Tape::new();
    let input = tape.constant(normalize_input(image, cfg.mean_subtract)?);
    let vars = encode(&mut tape, weights, cfg, input)?;
    Ok(FeaturePyramid { levels: vars.into_iter().map(|v| tape.value(v).clone()).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn padding_repeats_the_border() {
        let img = Tensor::<f32>::from_fn(&[1, 2, 3], |i| i as f32);
        let p = pad_to_multiple(&img).unwrap();
        assert_eq!(p.shape(), &[1, 32, 32]);
        assert_eq!(p.at3(0, 1, 2), 5.0);
        assert_eq!(p.at3(0, 31, 31), 5.0);
        assert_eq!(p.at3(0, 0, 20), 2.0);
        assert_eq!(p.at3(0, 20, 0), 3.0);
        let exact = Tensor::<f32>::zeros(&[3, 64, 32]);
        assert_eq!(pad_to_multiple(&exact).unwrap(), exact);
    }

    #[test]
    fn pyramid_shapes_64() {
        let cfg = ModelConfig::default();
        let w = ModelWeights::<f32>::init(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::random_uniform(&[3, 64, 64], 0.0, 1.0, &mut rng);
        let p = build_pyramid(&img, &w, &cfg).unwrap();
        let shapes: Vec<&[usize]> = p.levels.iter().map(|t| t.shape()).collect();
        assert_eq!(
            shapes,
            vec![&[32, 64, 64][..], &[32, 32, 32], &[64, 16, 16], &[96, 8, 8], &[128, 4, 4], &[192, 2, 2]]
        );
    }

    #[test]
    fn indivisible_extent_advises_padding() {
        let cfg = ModelConfig::default().with_width_scale(0.25);
        let w = ModelWeights::<f32>::init(&cfg);
        let err = build_pyramid(&Tensor::zeros(&[3, 48, 64]), &w, &cfg).unwrap_err();
        assert!(err.to_string().contains("pad"), "{err}");
    }

    #[test]
    fn downsample_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Tensor::<f32>::random_uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
        assert_eq!(downsample_image(&img, 1).unwrap(), img);
        let c = Tensor::<f32>::full(&[3, 32, 32], 0.25);
        for k in 1..=6 {
            let d = downsample_image(&c, k).unwrap();
            assert_eq!(d.shape()[1], 32 >> (k - 1));
            assert!(d.data().iter().all(|&v| v == 0.25));
        }
        let checker = Tensor::<f32>::from_fn(&[3, 2, 2], |i| ((i + i / 2) % 2) as f32);
        assert!(downsample_image(&checker, 2).unwrap().data().iter().all(|&v| v == 0.5));
        assert!(downsample_image(&img, 7).is_err());
    }

    #[test]
    fn mean_subtraction() {
        let img = Tensor::<f64>::from_fn(&[3, 2, 2], |i| i as f64);
        let n = normalize_input(&img, true).unwrap();
        for c in 0..3 {
            assert!(n.channel(c).iter().sum::<f64>().abs() < 1e-12);
        }
        assert_eq!(normalize_input(&img, false).unwrap(), img);
    }
}
