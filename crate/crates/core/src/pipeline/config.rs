//! Model and training configuration, stored as flat `key = value` text.
//!
//! Per-level lists are written coarse to fine (levels 6, 5, 4, 3, 2).
//! Unknown keys are rejected; `#` starts a comment.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matcher::MatchConfig;

/// Levels at which flow is estimated, coarse to fine.
pub const FLOW_LEVELS: [usize; 5] = [6, 5, 4, 3, 2];
/// Number of feature pyramid levels.
pub const PYRAMID_LEVELS: usize = 6;

/// Index into per-level arrays for flow level `level` (6..=2).
pub fn level_index(level: usize) -> usize {
    assert!((2..=6).contains(&level), "flow level {level} out of range");
    6 - level
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Multiplier on every hidden width (feature and unit channels).
    pub width_scale: f64,
    pub seed: u64,
    pub leaky_slope: f64,
    /// Subtract the per-image mean before feature extraction.
    pub mean_subtract: bool,
    pub match_radius: [usize; 5],
    pub match_displacement_stride: [usize; 5],
    pub match_sample_stride: [usize; 5],
    /// Kernel of the last conv in each M, S and R unit.
    pub last_kernel: [usize; 5],
    /// f-lconv window.
    pub lconv_window: [usize; 5],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width_scale: 1.0,
            seed: 0,
            leaky_slope: 0.1,
            mean_subtract: true,
            match_radius: [3, 3, 3, 6, 6],
            match_displacement_stride: [1, 1, 1, 2, 2],
            match_sample_stride: [1, 1, 1, 2, 2],
            last_kernel: [3, 3, 5, 5, 7],
            lconv_window: [3, 3, 5, 5, 7],
        }
    }
}

impl ModelConfig {
    pub fn with_width_scale(mut self, width_scale: f64) -> Self {
        self.width_scale = width_scale;
        self
    }

    pub fn match_config(&self, level: usize) -> MatchConfig {
        let i = level_index(level);
        MatchConfig {
            radius: self.match_radius[i],
            displacement_stride: self.match_displacement_stride[i],
            sample_stride: self.match_sample_stride[i],
        }
    }

    pub fn last_kernel(&self, level: usize) -> usize {
        self.last_kernel[level_index(level)]
    }

    pub fn window(&self, level: usize) -> usize {
        self.lconv_window[level_index(level)]
    }

    /// Scaled channel count.
    pub fn width(&self, base: usize) -> usize {
        ((base as f64 * self.width_scale).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_scale.is_finite() && self.width_scale > 0.0) {
            return Err(Error::Config(format!("width_scale must be positive, got {}", self.width_scale)));
        }
        if !(self.leaky_slope.is_finite() && (0.0..1.0).contains(&self.leaky_slope)) {
            return Err(Error::Config(format!("leaky_slope must be in [0, 1), got {}", self.leaky_slope)));
        }
        for level in FLOW_LEVELS {
            self.match_config(level).validate()?;
            let k = self.last_kernel(level);
            if k % 2 == 0 {
                return Err(Error::Config(format!("last_kernel at level {level} must be odd, got {k}")));
            }
            let w = self.window(level);
            if w % 2 == 0 {
                return Err(Error::Config(format!("lconv_window at level {level} must be odd, got {w}")));
            }
        }
        Ok(())
    }
}

/// Loss on each per-level estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    /// Squared end-point error.
    L2,
    /// `(‖e‖² + ε²)^q`.
    Charbonnier { epsilon: f64, exponent: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    /// Loss weight per flow level, coarse to fine.
    pub loss_weights: [f64; 5],
    /// Base learning rate for the stage that introduces each level.
    pub learning_rates: [f64; 5],
    /// Iterations (counted within a stage) at which the rate halves.
    pub lr_milestones: Vec<usize>,
    pub iterations_per_stage: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Finest level trained; stages stop after adding it.
    pub finest_level: usize,
    pub train_samples: usize,
    pub heldout_samples: usize,
    pub image_size: usize,
    pub max_displacement: f64,
    pub piecewise: bool,
    pub data_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::L2,
            loss_weights: [0.32, 0.08, 0.02, 0.01, 0.005],
            learning_rates: [1e-4, 1e-4, 1e-4, 5e-5, 4e-5],
            lr_milestones: vec![120_000, 160_000, 200_000, 240_000],
            iterations_per_stage: 300,
            batch_size: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            finest_level: 2,
            train_samples: 200,
            heldout_samples: 20,
            image_size: 64,
            max_displacement: 4.0,
            piecewise: false,
            data_seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn loss_weight(&self, level: usize) -> f64 {
        self.loss_weights[level_index(level)]
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=6).contains(&self.finest_level) {
            return Err(Error::Config(format!("finest_level must be in 2..=6, got {}", self.finest_level)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!("image_size must be a positive multiple of 32, got {}", self.image_size)));
        }
        if self.train_samples == 0 {
            return Err(Error::Config("train_samples must be positive".into()));
        }
        if self.learning_rates.iter().any(|&lr| !(lr.is_finite() && lr > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if let LossKind::Charbonnier { epsilon, exponent } = self.loss {
            if !(epsilon > 0.0 && exponent > 0.0) {
                return Err(Error::Config("charbonnier epsilon and exponent must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Both halves of a configuration file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{}`", v.trim())))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(key, s)).collect()
}

fn parse_levels<T: std::str::FromStr + Copy>(key: &str, v: &str) -> Result<[T; 5]> {
    let list: Vec<T> = parse_list(key, v)?;
    list.try_into()
        .map_err(|l: Vec<T>| Error::Config(format!("`{key}`: expected 5 per-level values, got {}", l.len())))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(Error::Config(format!("`{key}`: expected true/false, got `{other}`"))),
    }
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Desk-scale training setup: a half-width model on 64×64 translations.
    pub fn toy() -> Self {
        RunConfig {
            model: ModelConfig::default().with_width_scale(0.5),
            train: TrainConfig {
                learning_rates: [3e-4; 5],
                lr_milestones: vec![400],
                iterations_per_stage: 600,
                ..TrainConfig::default()
            },
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_over(RunConfig::default(), text)
    }

    /// Applies the keys in `text` on top of `base`.
    pub fn parse_over(base: RunConfig, text: &str) -> Result<Self> {
        let mut cfg = base;
        let mut charbonnier = match cfg.train.loss {
            LossKind::Charbonnier { epsilon, exponent } => (epsilon, exponent),
            LossKind::L2 => (0.01, 0.2),
        };
        let mut loss_name = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let (m, t) = (&mut cfg.model, &mut cfg.train);
            match key {
                "width_scale" => m.width_scale = parse_num(key, value)?,
                "seed" => m.seed = parse_num(key, value)?,
                "leaky_slope" => m.leaky_slope = parse_num(key, value)?,
                "mean_subtract" => m.mean_subtract = parse_bool(key, value)?,
                "match_radius" => m.match_radius = parse_levels(key, value)?,
                "match_displacement_stride" => m.match_displacement_stride = parse_levels(key, value)?,
                "match_sample_stride" => m.match_sample_stride = parse_levels(key, value)?,
                "last_kernel" => m.last_kernel = parse_levels(key, value)?,
                "lconv_window" => m.lconv_window = parse_levels(key, value)?,
                "loss" => loss_name = Some(value.to_string()),
                "charbonnier_epsilon" => charbonnier.0 = parse_num(key, value)?,
                "charbonnier_exponent" => charbonnier.1 = parse_num(key, value)?,
                "loss_weights" => t.loss_weights = parse_levels(key, value)?,
                "learning_rates" => t.learning_rates = parse_levels(key, value)?,
                "lr_milestones" => t.lr_milestones = parse_list(key, value)?,
                "iterations_per_stage" => t.iterations_per_stage = parse_num(key, value)?,
                "batch_size" => t.batch_size = parse_num(key, value)?,
                "adam_beta1" => t.adam_beta1 = parse_num(key, value)?,
                "adam_beta2" => t.adam_beta2 = parse_num(key, value)?,
                "adam_epsilon" => t.adam_epsilon = parse_num(key, value)?,
                "finest_level" => t.finest_level = parse_num(key, value)?,
                "train_samples" => t.train_samples = parse_num(key, value)?,
                "heldout_samples" => t.heldout_samples = parse_num(key, value)?,
                "image_size" => t.image_size = parse_num(key, value)?,
                "max_displacement" => t.max_displacement = parse_num(key, value)?,
                "piecewise" => t.piecewise = parse_bool(key, value)?,
                "data_seed" => t.data_seed = parse_num(key, value)?,
                _ => {
                    return Err(Error::UnknownConfigKey {
                        line: n + 1,
                        key: key.to_string(),
                    })
                }
            }
        }
        let (epsilon, exponent) = charbonnier;
        cfg.train.loss = match (loss_name.as_deref(), cfg.train.loss) {
            (None, LossKind::L2) | (Some("l2"), _) => LossKind::L2,
            (None, LossKind::Charbonnier { .. }) | (Some("charbonnier"), _) => LossKind::Charbonnier { epsilon, exponent },
            (Some(other), _) => return Err(Error::Config(format!("`loss`: unknown kind `{other}`"))),
        };
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_over(RunConfig::default(), path)
    }

    pub fn load_over(base: RunConfig, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_over(base, &text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Serializes every key; floats use shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut s = String::new();
        let _ = writeln!(s, "width_scale = {}", m.width_scale);
        let _ = writeln!(s, "seed = {}", m.seed);
        let _ = writeln!(s, "leaky_slope = {}", m.leaky_slope);
        let _ = writeln!(s, "mean_subtract = {}", m.mean_subtract);
        let _ = writeln!(s, "match_radius = {}", join(&m.match_radius));
        let _ = writeln!(s, "match_displacement_stride = {}", join(&m.match_displacement_stride));
        let _ = writeln!(s, "match_sample_stride = {}", join(&m.match_sample_stride));
        let _ = writeln!(s, "last_kernel = {}", join(&m.last_kernel));
        let _ = writeln!(s, "lconv_window = {}", join(&m.lconv_window));
        match t.loss {
            LossKind::L2 => {
                let _ = writeln!(s, "loss = l2");
            }
            LossKind::Charbonnier { epsilon, exponent } => {
                let _ = writeln!(s, "loss = charbonnier");
                let _ = writeln!(s, "charbonnier_epsilon = {epsilon}");
                let _ = writeln!(s, "charbonnier_exponent = {exponent}");
            }
        }
        let _ = writeln!(s, "loss_weights = {}", join(&t.loss_weights));
        let _ = writeln!(s, "learning_rates = {}", join(&t.learning_rates));
        let _ = writeln!(s, "lr_milestones = {}", join(&t.lr_milestones));
        let _ = writeln!(s, "iterations_per_stage = {}", t.iterations_per_stage);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "adam_beta1 = {}", t.adam_beta1);
        let _ = writeln!(s, "adam_beta2 = {}", t.adam_beta2);
        let _ = writeln!(s, "adam_epsilon = {}", t.adam_epsilon);
        let _ = writeln!(s, "finest_level = {}", t.finest_level);
        let _ = writeln!(s, "train_samples = {}", t.train_samples);
        let _ = writeln!(s, "heldout_samples = {}", t.heldout_samples);
        let _ = writeln!(s, "image_size = {}", t.image_size);
        let _ = writeln!(s, "max_displacement = {}", t.max_displacement);
        let _ = writeln!(s, "piecewise = {}", t.piecewise);
        let _ = writeln!(s, "data_seed = {}", t.data_seed);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        match RunConfig::parse("width_scale = 0.5\nbogus = 1\n") {
            Err(Error::UnknownConfigKey { line, key }) => {
                assert_eq!(line, 2);
                assert_eq!(key, "bogus");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn comments_and_partial_files() {
        let cfg = RunConfig::parse("# toy\nwidth_scale = 0.5 # half\n\nloss = charbonnier\n").unwrap();
        assert_eq!(cfg.model.width_scale, 0.5);
        assert_eq!(cfg.train.loss, LossKind::Charbonnier { epsilon: 0.01, exponent: 0.2 });
    }

    #[test]
    fn files_layer_over_a_base() {
        let toy = RunConfig::toy();
        let cfg = RunConfig::parse_over(toy.clone(), "iterations_per_stage = 7\n").unwrap();
        assert_eq!(cfg.model.width_scale, 0.5);
        assert_eq!(cfg.train.iterations_per_stage, 7);
        assert_eq!(cfg.train.learning_rates, toy.train.learning_rates);

        let base = RunConfig::parse("loss = charbonnier\ncharbonnier_epsilon = 0.05\n").unwrap();
        let cfg = RunConfig::parse_over(base, "charbonnier_exponent = 0.3\n").unwrap();
        assert_eq!(cfg.train.loss, LossKind::Charbonnier { epsilon: 0.05, exponent: 0.3 });
    }

    #[test]
    fn per_level_lists_need_five_values() {
        assert!(RunConfig::parse("last_kernel = 3,3,5\n").is_err());
        assert!(RunConfig::parse("last_kernel = 3,3,4,5,7\n").is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_values_round_trip(
            width in 0.01f64..4.0,
            slope in 0.0f64..0.9,
            lr in proptest::array::uniform5(1e-7f64..1e-1),
            weights in proptest::array::uniform5(0.0f64..10.0),
            seed in any::<u64>(),
            eps in 1e-6f64..1.0,
        ) {
            let mut cfg = RunConfig::default();
            cfg.model.width_scale = width;
            cfg.model.leaky_slope = slope;
            cfg.model.seed = seed;
            cfg.train.learning_rates = lr;
            cfg.train.loss_weights = weights;
            cfg.train.loss = LossKind::Charbonnier { epsilon: eps, exponent: 0.2 };
            let back = RunConfig::parse(&cfg.to_text()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
