//! Full coarse-to-fine estimator: encoder, then M → S → R at levels 6..2,
//! then bilinear upsampling of the level-2 flow to full resolution.

pub mod arch;
pub mod config;
mod loss;
mod synthetic;
mod train;
mod weights;

pub use config::{LossKind, ModelConfig, RunConfig, TrainConfig, FLOW_LEVELS, PYRAMID_LEVELS};
pub use loss::{flow_penalty, gt_at_level, multi_level_loss, multi_level_loss_on_tape};
pub use synthetic::{make_synthetic_dataset, SyntheticOptions, TrainSample};
pub use train::{evaluate_aee, learning_rate, train_toy, training_stages, Adam, LossRecord, TrainOutcome};
pub use weights::{ModelWeights, OUTPUT_LAYER_GAIN};

use crate::encoder::{downsample_image, encode, normalize_input, ImagePair};
use crate::error::{Error, Result};
use crate::matcher::matching_unit;
use crate::refiner::refinement_unit;
use crate::regularizer::regularization_unit;
use crate::tensor::{Element, Tape, Tensor, Var};
use crate::warp::FlowField;

/// Which part of the cascade runs: levels 6 down to `finest_level`, with R
/// at the finest level only when `regularize_finest` is set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub finest_level: usize,
    pub regularize_finest: bool,
}

impl Stage {
    pub fn full() -> Self {
        Stage { finest_level: 2, regularize_finest: true }
    }

    pub fn levels(&self) -> impl Iterator<Item = usize> {
        (self.finest_level..=6).rev()
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=6).contains(&self.finest_level) {
            return Err(Error::InvalidArgument(format!("stage finest level {} outside 2..=6", self.finest_level)));
        }
        Ok(())
    }
}

/// Per-level outputs of the three units.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelFlows<T> {
    pub level: usize,
    pub m: T,
    pub s: T,
    pub r: Option<T>,
}

impl<T> LevelFlows<T> {
    /// Stage outputs in cascade order.
    pub fn stages(&self) -> impl Iterator<Item = &T> {
        [&self.m, &self.s].into_iter().chain(self.r.as_ref())
    }

    /// The level's final estimate.
    pub fn last(&self) -> &T {
        self.r.as_ref().unwrap_or(&self.s)
    }
}

/// Handles of a forward pass recorded on a tape.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub levels: Vec<LevelFlows<Var>>,
    /// Finest estimate upsampled to the input resolution.
    pub output: Var,
}

/// Result of [`forward`].
#[derive(Clone, Debug)]
pub struct Estimate<E: Element = f32> {
    pub flow: FlowField<E>,
    pub levels: Vec<LevelFlows<Tensor<E>>>,
}

/// Records the forward pass on `tape`.
pub fn forward_on_tape<E: Element>(
    tape: &mut Tape<E>,
    weights: &ModelWeights<E>,
    cfg: &ModelConfig,
    pair: &ImagePair<E>,
    stage: Stage,
) -> Result<ForwardVars> {
    stage.validate()?;
    let in1 = tape.constant(normalize_input(&pair.first, cfg.mean_subtract)?);
    let in2 = tape.constant(normalize_input(&pair.second, cfg.mean_subtract)?);
    let feats1 = encode(tape, weights, cfg, in1)?;
    let feats2 = encode(tape, weights, cfg, in2)?;

    let mut levels = Vec::new();
    let mut prev: Option<Var> = None;
    for level in stage.levels() {
        let (f1, f2) = (feats1[level - 1], feats2[level - 1]);
        let m = matching_unit(tape, weights, cfg, level, f1, f2, prev)?;
        let s = refinement_unit(tape, weights, cfg, level, f1, f2, m)?;
        let r = if level > stage.finest_level || stage.regularize_finest {
            let im1 = tape.constant(downsample_image(&pair.first, level)?);
            let im2 = tape.constant(downsample_image(&pair.second, level)?);
            Some(regularization_unit(tape, weights, cfg, level, f1, im1, im2, s)?)
        } else {
            None
        };
        let flow = LevelFlows { level, m, s, r };
        prev = Some(*flow.last());
        levels.push(flow);
    }

    let finest = levels.last().map(|l| *l.last()).expect("at least one level");
    let mut output = finest;
    for _ in 1..stage.finest_level {
        let up = tape.upsample2x(output)?;
        output = tape.scale(up, 2.0);
    }
    tape.label(output, "flow1");
    Ok(ForwardVars { levels, output })
}

/// Full-resolution flow plus every per-level intermediate.
pub fn forward<E: Element>(pair: &ImagePair<E>, weights: &ModelWeights<E>, cfg: &ModelConfig) -> Result<Estimate<E>> {
    forward_stage(pair, weights, cfg, Stage::full())
}

pub fn forward_stage<E: Element>(
    pair: &ImagePair<E>,
    weights: &ModelWeights<E>,
    cfg: &ModelConfig,
    stage: Stage,
) -> Result<Estimate<E>> {
    let mut tape = Tape::new();
    let vars = forward_on_tape(&mut tape, weights, cfg, pair, stage)?;
    let value = |v: &Var| tape.value(*v).clone();
    let levels = vars
        .levels
        .iter()
        .map(|l| LevelFlows { level: l.level, m: value(&l.m), s: value(&l.s), r: l.r.as_ref().map(value) })
        .collect();
    let flow = FlowField::new(value(&vars.output))?;
    Ok(Estimate { flow, levels })
}

/// Total number of scalar parameters held by `weights`.
pub fn parameter_count<E: Element>(weights: &ModelWeights<E>) -> usize {
    weights.param_count()
}

/// Parameter count per module (`NetC`, `M6`, `S6`, `R6`, ..., `R2`) as
/// implied by `cfg`.
pub fn module_parameter_counts(cfg: &ModelConfig) -> Vec<(String, usize)> {
    arch::all_layers(cfg)
        .into_iter()
        .map(|(name, layers)| (name, layers.iter().map(arch::LayerDef::param_count).sum()))
        .collect()
}
