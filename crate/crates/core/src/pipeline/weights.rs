//! Named parameter store.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::{self, LayerDef};
use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Element, Stride, Tensor};

/// Gain applied to the He bound of every unit's output layer, so that a
/// fresh model starts close to "no residual, uniform filters".
pub const OUTPUT_LAYER_GAIN: f64 = 0.1;

/// Ordered map from parameter name to tensor, in graph order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<E: Element = f32> {
    tensors: IndexMap<String, Tensor<E>>,
}

impl<E: Element> Default for ModelWeights<E> {
    fn default() -> Self {
        ModelWeights { tensors: IndexMap::new() }
    }
}

/// 4×4 transposed-conv kernel that performs bilinear 2× upsampling and
/// doubles the values (flow magnitudes scale with resolution).
fn bilinear_upconv<E: Element>(channels: usize) -> Tensor<E> {
    const TAPS: [f64; 4] = [0.25, 0.75, 0.75, 0.25];
    Tensor::from_fn(&[channels, channels, 4, 4], |i| {
        let (ky, kx) = ((i / 4) % 4, i % 4);
        let (ci, co) = (i / (16 * channels), (i / 16) % channels);
        if ci == co {
            E::lit(2.0 * TAPS[ky] * TAPS[kx])
        } else {
            E::zero()
        }
    })
}

/// Last conv of an M, S or R stack (the only convs without activation).
fn is_output_layer(layer: &LayerDef) -> bool {
    !layer.activation && layer.spec.has_bias()
}

impl<E: Element> ModelWeights<E> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fresh weights for `cfg`: fan-in scaled uniform convolutions, zero
    /// biases, bilinear upconvs. Seeded by `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut w = ModelWeights::new();
        for (_, layers) in arch::all_layers(cfg) {
            for layer in layers {
                w.insert_layer(&layer, &mut rng);
            }
        }
        w
    }

    fn insert_layer(&mut self, layer: &LayerDef, rng: &mut impl Rng) {
        let spec = &layer.spec;
        let weight = match spec.stride {
            Stride::Half => bilinear_upconv(spec.out_channels),
            Stride::By(_) => {
                let fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w;
                let gain = if is_output_layer(layer) { OUTPUT_LAYER_GAIN } else { 1.0 };
                let bound = gain * (6.0 / fan_in as f64).sqrt();
                Tensor::random_uniform(&spec.weight_shape(), -bound, bound, rng)
            }
        };
        self.tensors.insert(layer.weight_name(), weight);
        if let Some(name) = layer.bias_name() {
            self.tensors.insert(name, Tensor::zeros(&[spec.out_channels]));
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<E>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Inserts or replaces; returns the previous tensor.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<E>) -> Option<Tensor<E>> {
        self.tensors.insert(name.into(), value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Checks that exactly the tensors `cfg` expects are present, with the
    /// expected shapes.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Self::expected_shapes(cfg);
        for (name, shape) in &expected {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::WeightShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    actual: t.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::UnexpectedWeight(extra.clone()));
        }
        Ok(())
    }

    pub fn expected_shapes(cfg: &ModelConfig) -> IndexMap<String, Vec<usize>> {
        let mut out = IndexMap::new();
        for (_, layers) in arch::all_layers(cfg) {
            for layer in layers {
                out.insert(layer.weight_name(), layer.spec.weight_shape().to_vec());
                if let Some(b) = layer.bias_name() {
                    out.insert(b, vec![layer.spec.out_channels]);
                }
            }
        }
        out
    }

    pub fn cast<F: Element>(&self) -> ModelWeights<F> {
        ModelWeights {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Copies every tensor of flow level `from` onto the same-named tensor of
    /// level `to` when the shapes agree. Returns the names overwritten.
    pub fn copy_level(&mut self, from: usize, to: usize) -> Vec<String> {
        let mut copied = Vec::new();
        let names: Vec<String> = self.tensors.keys().cloned().collect();
        for name in names {
            let Some(src) = rename_level(&name, to, from) else { continue };
            let Some(src_t) = self.tensors.get(&src).cloned() else { continue };
            let dst = &mut self.tensors[&name];
            if dst.shape() == src_t.shape() {
                *dst = src_t;
                copied.push(name);
            }
        }
        copied
    }
}

/// Maps a unit parameter name at level `level` to the same layer at level
/// `other`, e.g. `conv5_1_M.weight` → `conv6_1_M.weight`.
fn rename_level(name: &str, level: usize, other: usize) -> Option<String> {
    let (layer, _) = name.split_once('.')?;
    if !layer.ends_with("_M") && !layer.ends_with("_S") && !layer.ends_with("_R") {
        return None;
    }
    let prefix = if layer.starts_with("upconv") { "upconv" } else { "conv" };
    let rest = layer.strip_prefix(prefix)?;
    let digit = rest.chars().next()?.to_digit(10)? as usize;
    (digit == level).then(|| format!("{prefix}{other}{}", &name[prefix.len() + 1..]))
}
