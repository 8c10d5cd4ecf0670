//! Layer tables for the feature encoder and the per-level M, S and R units.
//!
//! Names follow the `conv5_1_M` convention; every conv owns `<name>.weight`
//! and `<name>.bias`, upconvs own only `<name>.weight`.

use super::config::{ModelConfig, FLOW_LEVELS};
use super::weights::ModelWeights;
use crate::error::Result;
use crate::tensor::{ConvSpec, Element, Tape, Var};

/// Base channel counts of pyramid levels 1..=6.
pub const FEATURE_CHANNELS: [usize; 6] = [32, 32, 64, 96, 128, 192];

#[derive(Clone, Debug, PartialEq)]
pub struct LayerDef {
    pub name: String,
    pub spec: ConvSpec,
    /// Followed by a leaky ReLU.
    pub activation: bool,
}

impl LayerDef {
    fn conv(name: String, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, activation: bool) -> Self {
        LayerDef {
            name,
            spec: ConvSpec::same(in_ch, out_ch, kernel, stride),
            activation,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> Option<String> {
        self.spec.has_bias().then(|| format!("{}.bias", self.name))
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }
}

/// Feature channels at pyramid level `level` (1..=6).
pub fn feature_channels(cfg: &ModelConfig, level: usize) -> usize {
    cfg.width(FEATURE_CHANNELS[level - 1])
}

/// Encoder layers grouped by the pyramid level whose features they produce.
pub fn encoder_layers(cfg: &ModelConfig) -> Vec<Vec<LayerDef>> {
    let c = |l| feature_channels(cfg, l);
    let conv = |name: &str, i, o, k, s| LayerDef::conv(name.to_string(), i, o, k, s, true);
    vec![
        vec![conv("conv1", 3, c(1), 7, 1)],
        vec![
            conv("conv2_1", c(1), c(2), 3, 2),
            conv("conv2_2", c(2), c(2), 3, 1),
            conv("conv2_3", c(2), c(2), 3, 1),
        ],
        vec![conv("conv3_1", c(2), c(3), 3, 2), conv("conv3_2", c(3), c(3), 3, 1)],
        vec![conv("conv4_1", c(3), c(4), 3, 2), conv("conv4_2", c(4), c(4), 3, 1)],
        vec![conv("conv5", c(4), c(5), 3, 2)],
        vec![conv("conv6", c(5), c(6), 3, 2)],
    ]
}

/// Stack of 3×3 convs with leaky ReLU, whose last layer uses `last_kernel`
/// and no activation.
fn unit_stack(prefix: &str, level: usize, suffix: &str, widths: &[usize], last_kernel: usize, last_name: Option<&str>) -> Vec<LayerDef> {
    let n = widths.len() - 1;
    (0..n)
        .map(|i| {
            let last = i + 1 == n;
            let name = match (last, last_name) {
                (true, Some(tag)) => format!("{prefix}{level}_{tag}_{suffix}"),
                _ => format!("{prefix}{level}_{}_{suffix}", i + 1),
            };
            LayerDef::conv(name, widths[i], widths[i + 1], if last { last_kernel } else { 3 }, 1, !last)
        })
        .collect()
}

pub fn upconv_layer(level: usize) -> Option<LayerDef> {
    (level < 6).then(|| LayerDef {
        name: format!("upconv{level}_M"),
        spec: ConvSpec::upconv(2, 2),
        activation: false,
    })
}

/// Cost-volume filtering stack of the matching unit.
pub fn matcher_layers(cfg: &ModelConfig, level: usize) -> Vec<LayerDef> {
    let taps = cfg.match_config(level).channels();
    let widths = [taps, cfg.width(128), cfg.width(64), cfg.width(32), 2];
    unit_stack("conv", level, "M", &widths, cfg.last_kernel(level), None)
}

pub fn refiner_layers(cfg: &ModelConfig, level: usize) -> Vec<LayerDef> {
    let f = feature_channels(cfg, level);
    let widths = [2 * f + 2, cfg.width(128), cfg.width(64), cfg.width(32), 2];
    unit_stack("conv", level, "S", &widths, cfg.last_kernel(level), None)
}

/// Distance-metric stack of the regularization unit.
pub fn regularizer_layers(cfg: &ModelConfig, level: usize) -> Vec<LayerDef> {
    let f = feature_channels(cfg, level);
    let w = cfg.window(level);
    let widths = [
        f + 3,
        cfg.width(128),
        cfg.width(128),
        cfg.width(64),
        cfg.width(64),
        cfg.width(32),
        cfg.width(32),
        w * w,
    ];
    unit_stack("conv", level, "R", &widths, cfg.last_kernel(level), Some("dist"))
}

/// Every parameterized layer of the model, grouped by module name.
pub fn all_layers(cfg: &ModelConfig) -> Vec<(String, Vec<LayerDef>)> {
    let mut groups = vec![("NetC".to_string(), encoder_layers(cfg).concat())];
    for level in FLOW_LEVELS {
        let mut m: Vec<LayerDef> = upconv_layer(level).into_iter().collect();
        m.extend(matcher_layers(cfg, level));
        groups.push((format!("M{level}"), m));
        groups.push((format!("S{level}"), refiner_layers(cfg, level)));
        groups.push((format!("R{level}"), regularizer_layers(cfg, level)));
    }
    groups
}

/// Runs a conv stack, labeling each layer output with its layer name.
pub fn run_stack<E: Element>(
    tape: &mut Tape<E>,
    weights: &ModelWeights<E>,
    layers: &[LayerDef],
    input: Var,
    slope: f64,
) -> Result<Var> {
    let mut x = input;
    for layer in layers {
        let w = tape.param(&layer.weight_name(), weights.get(&layer.weight_name())?);
        let b = match layer.bias_name() {
            Some(name) => Some(tape.param(&name, weights.get(&name)?)),
            None => None,
        };
        x = tape.conv2d(x, w, b, layer.spec)?;
        if layer.activation {
            x = tape.leaky_relu(x, slope);
        }
        tape.label(x, layer.name.clone());
    }
    Ok(x)
}
