//! Coarse-to-fine optical flow engine: feature pyramid, cascaded matching
//! and sub-pixel refinement, feature-driven local-convolution regularization,
//! reverse-mode gradients and toy-scale training.

pub mod encoder;
pub mod error;
pub mod flowio;
pub mod matcher;
pub mod pipeline;
pub mod refiner;
pub mod regularizer;
pub mod selfcheck;
pub mod tensor;
pub mod warp;

pub use encoder::{build_pyramid, pad_to_multiple, FeaturePyramid, ImagePair};
pub use error::{Error, Result};
pub use matcher::MatchConfig;
pub use pipeline::{forward, Estimate, ModelConfig, ModelWeights, RunConfig, TrainConfig};
pub use tensor::{Element, Tape, Tensor, Var};
pub use warp::FlowField;
