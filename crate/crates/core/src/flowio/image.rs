//! RGB image I/O and flow colorization.

use std::path::Path;

use image::{ImageFormat, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::warp::FlowField;

/// Reads a PNG or binary PPM as a `3×H×W` tensor with values in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let unsupported = |msg: String| Error::UnsupportedFormat { path: path.into(), msg };
    let format = image::guess_format(bytes).map_err(|e| unsupported(e.to_string()))?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Pnm) {
        return Err(unsupported(format!("{format:?} (PNG and PPM are supported)")));
    }
    let img = ImageReader::with_format(std::io::Cursor::new(bytes), format)
        .decode()
        .map_err(|e| Error::Malformed { path: path.into(), msg: e.to_string() })?
        .into_rgb8();
    Ok(from_rgb8(&img))
}

fn from_rgb8(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let plane = w * h;
    Tensor::from_fn(&[3, h, w], |i| raw[(i % plane) * 3 + i / plane] as f32 / 255.0)
}

fn to_rgb8(image: &Tensor<f32>) -> Result<RgbImage> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::ShapeMismatch { op: "write_png", dim: "channels", expected: 3, actual: c });
    }
    let plane = h * w;
    let d = image.data();
    let raw = (0..3 * plane)
        .map(|i| (d[(i % 3) * plane + i / 3].clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer matches extents"))
}

/// Writes a `3×H×W` tensor in `[0, 1]` as an 8-bit PNG.
pub fn write_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    to_rgb8(image)?
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Malformed { path: path.into(), msg: other.to_string() },
        })
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Hue of a flow vector in degrees, `[0, 360)`.
pub fn flow_hue(u: f64, v: f64) -> f64 {
    v.atan2(u).to_degrees().rem_euclid(360.0)
}

/// Hue encodes direction, saturation encodes `|flow| / max_mag` (clipped);
/// zero flow is white. `max_mag` defaults to the largest magnitude present.
pub fn colorize(flow: &FlowField<f32>, max_mag: Option<f64>) -> Tensor<f32> {
    let (h, w) = (flow.height(), flow.width());
    let plane = h * w;
    let mags: Vec<f64> = (0..plane).map(|p| (flow.u()[p] as f64).hypot(flow.v()[p] as f64)).collect();
    let scale = max_mag.unwrap_or_else(|| mags.iter().copied().fold(0.0, f64::max));
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let mut out = vec![0f32; 3 * plane];
    for p in 0..plane {
        let sat = (mags[p] / scale).min(1.0);
        let rgb = hsv_to_rgb(flow_hue(flow.u()[p] as f64, flow.v()[p] as f64), sat, 1.0);
        for (c, v) in rgb.into_iter().enumerate() {
            out[c * plane + p] = v as f32;
        }
    }
    Tensor::new(vec![3, h, w], out).expect("sized to extents")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_bytes_to_tensor() {
        let mut b = b"P6 2 2 255\n".to_vec();
        b.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 153]);
        let t = decode_image(&b, Path::new("x.ppm")).unwrap();
        assert_eq!(t.shape(), &[3, 2, 2]);
        assert_eq!(t.channel(0), &[1.0, 0.0, 0.0, 0.2]);
        assert_eq!(t.channel(1), &[0.0, 1.0, 0.0, 0.4]);
        assert_eq!(t.channel(2), &[0.0, 0.0, 1.0, 0.6]);
    }

    #[test]
    fn unsupported_format() {
        let err = decode_image(b"GIF89a....", Path::new("x.gif")).unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat { .. }), "{err}");
        assert!(matches!(decode_image(b"hello", Path::new("x")), Err(Error::UnsupportedFormat { .. })));
    }

    #[test]
    fn zero_flow_is_white() {
        let img = colorize(&FlowField::zeros(3, 3), None);
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn opposite_directions_are_complementary() {
        for (u, v) in [(1.0, 0.0), (0.3, -2.0), (-1.0, 1.0)] {
            let diff = (flow_hue(u, v) - flow_hue(-u, -v)).rem_euclid(360.0);
            assert!((diff - 180.0).abs() < 1e-9);
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let flow = FlowField::constant(4, 4, 1.0, -1.0);
        let img = colorize(&flow, Some(2.0));
        write_png(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
