//! Multi-grained vision-language pre-training at desk scale.
//!
//! One model with vision, text and fusion modules is trained on a mixed
//! batch of caption-, object-, region- and video-level samples with
//! contrastive, matching, masked-language-modeling and box losses.

pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod fusion;
pub mod math;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod text;
pub mod trainer;
pub mod vision;

pub use error::{Error, Result};
pub use math::{DType, Graph, ParamId, ParamStore, Real, Tensor, Var};
pub use model::{Model, ModelConfig};
pub use objectives::{LossBreakdown, ObjectiveConfig};
pub use text::Vocab;
pub use vision::{BoundingBox, ImageTensor, VideoClip};
