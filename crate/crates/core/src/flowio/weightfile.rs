//! Weight files: `LFNW`, version, entry count, then per entry the name,
//! the shape and the `f32` values. All integers are little-endian `u32`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::{ModelConfig, ModelWeights};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: [u8; 4] = *b"LFNW";
pub const WEIGHTS_VERSION: u32 = 1;

pub fn encode_weights(weights: &ModelWeights<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(&WEIGHTS_MAGIC);
    u32le(&mut out, WEIGHTS_VERSION as usize);
    u32le(&mut out, weights.len());
    for (name, t) in weights.iter() {
        u32le(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        u32le(&mut out, t.shape().len());
        for &d in t.shape() {
            u32le(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                path: self.path.into(),
                expected: self.pos.saturating_add(n),
                found: self.bytes.len(),
            }),
        }
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn malformed(&self, msg: impl Into<String>) -> Error {
        Error::Malformed { path: self.path.into(), msg: msg.into() }
    }
}

pub fn decode_weights(bytes: &[u8], path: &Path) -> Result<ModelWeights<f32>> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != WEIGHTS_MAGIC {
        return Err(Error::BadMagic { path: path.into(), found: magic });
    }
    let version = r.u32()?;
    if version != WEIGHTS_VERSION as usize {
        return Err(r.malformed(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut weights = ModelWeights::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.malformed("entry name is not UTF-8"))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if shape.contains(&0) {
            return Err(r.malformed(format!("`{name}` has a zero extent")));
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.malformed(format!("`{name}` is too large")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| r.malformed("entry too large"))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if weights.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(r.malformed(format!("duplicate entry `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(weights)
}

pub fn write_weights(path: &Path, weights: &ModelWeights<f32>) -> Result<()> {
    std::fs::write(path, encode_weights(weights)).map_err(|e| Error::io(path, e))
}

pub fn read_weights(path: &Path) -> Result<ModelWeights<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes, path)
}

/// Reads weights and checks them against the layers `cfg` implies.
pub fn load_weights(path: &Path, cfg: &ModelConfig) -> Result<ModelWeights<f32>> {
    let w = read_weights(path)?;
    w.validate(cfg)?;
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelWeights<f32> {
        let mut w = ModelWeights::new();
        w.insert("a.weight", Tensor::from_fn(&[2, 1, 3, 3], |i| i as f32 * 0.1 - 0.4));
        w.insert("a.bias", Tensor::new(vec![2], vec![-0.0, f32::MIN_POSITIVE]).unwrap());
        w
    }

    #[test]
    fn round_trip_bits() {
        let w = small();
        let back = decode_weights(&encode_weights(&w), Path::new("mem")).unwrap();
        let bits = |w: &ModelWeights<f32>| {
            w.iter()
                .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&back), bits(&w));
    }

    #[test]
    fn header_layout() {
        let b = encode_weights(&small());
        assert_eq!(&b[..4], b"LFNW");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 8);
        assert_eq!(&b[16..24], b"a.weight");
    }

    #[test]
    fn rejects_malformed() {
        let p = Path::new("w.lfnw");
        let b = encode_weights(&small());
        assert!(matches!(decode_weights(&b[..b.len() - 1], p), Err(Error::Truncated { .. })));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode_weights(&bad, p), Err(Error::BadMagic { .. })));
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(decode_weights(&extra, p), Err(Error::Malformed { .. })));
        let mut version = b;
        version[4] = 9;
        assert!(matches!(decode_weights(&version, p), Err(Error::Malformed { .. })));
    }
}
