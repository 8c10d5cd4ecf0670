//! Middlebury `.flo` files: `PIEH` magic, width and height as `i32`, then
//! interleaved `(u, v)` `f32` pairs, row-major, all little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::warp::FlowField;

pub const FLO_MAGIC: [u8; 4] = *b"PIEH";
const HEADER: usize = 12;

pub fn encode_flo(flow: &FlowField<f32>) -> Vec<u8> {
    let (h, w) = (flow.height(), flow.width());
    let mut out = Vec::with_capacity(HEADER + 8 * h * w);
    out.extend_from_slice(&FLO_MAGIC);
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for (&u, &v) in flow.u().iter().zip(flow.v()) {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8], path: &Path) -> Result<FlowField<f32>> {
    if bytes.len() < HEADER {
        return Err(Error::Truncated { path: path.into(), expected: HEADER, found: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != FLO_MAGIC {
        return Err(Error::BadMagic { path: path.into(), found: magic });
    }
    let dim = |i: usize| i32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let (w, h) = (dim(4), dim(8));
    if w <= 0 || h <= 0 {
        return Err(Error::Malformed { path: path.into(), msg: format!("non-positive extent {w}x{h}") });
    }
    let (w, h) = (w as usize, h as usize);
    let expected = HEADER + 8 * w * h;
    if bytes.len() < expected {
        return Err(Error::Truncated { path: path.into(), expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::Malformed {
            path: path.into(),
            msg: format!("{} trailing bytes after payload", bytes.len() - expected),
        });
    }
    let plane = w * h;
    let mut data = vec![0f32; 2 * plane];
    for (p, pair) in bytes[HEADER..].chunks_exact(8).enumerate() {
        data[p] = f32::from_le_bytes(pair[..4].try_into().expect("4 bytes"));
        data[plane + p] = f32::from_le_bytes(pair[4..].try_into().expect("4 bytes"));
    }
    let t = Tensor::new(vec![2, h, w], data)?;
    if !t.is_finite() {
        return Err(Error::Malformed { path: path.into(), msg: "non-finite flow values".into() });
    }
    FlowField::new(t)
}

pub fn write_flo(path: &Path, flow: &FlowField<f32>) -> Result<()> {
    std::fs::write(path, encode_flo(flow)).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: &Path) -> Result<FlowField<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_2x2_is_44_bytes() {
        let bytes = encode_flo(&FlowField::zeros(2, 2));
        assert_eq!(bytes.len(), 44);
        assert_eq!(&bytes[..4], b"PIEH");
        assert_eq!(f32::from_le_bytes(bytes[..4].try_into().unwrap()), 202021.25);
    }

    #[test]
    fn round_trip_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let flow = FlowField::new(Tensor::random_uniform(&[2, 3, 5], -9.0, 9.0, &mut rng)).unwrap();
        let back = decode_flo(&encode_flo(&flow), Path::new("mem")).unwrap();
        assert_eq!(back, flow);
    }

    #[test]
    fn interleaving_order() {
        let flow = FlowField::new(Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let b = encode_flo(&flow);
        let vals: Vec<f32> = b[12..].chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(vals, vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn rejects_bad_input() {
        let p = Path::new("x.flo");
        let mut b = encode_flo(&FlowField::zeros(2, 2));
        assert!(matches!(decode_flo(&b[..40], p), Err(Error::Truncated { .. })));
        assert!(matches!(decode_flo(&b[..5], p), Err(Error::Truncated { .. })));
        b[..4].copy_from_slice(&[0; 4]);
        assert!(matches!(decode_flo(&b, p), Err(Error::BadMagic { .. })));
        let mut neg = encode_flo(&FlowField::zeros(2, 2));
        neg[4..8].copy_from_slice(&(-2i32).to_le_bytes());
        assert!(matches!(decode_flo(&neg, p), Err(Error::Malformed { .. })));
    }
}
