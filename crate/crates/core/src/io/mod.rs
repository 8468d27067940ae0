//! Bundle, weight and task file formats.

pub mod bundle;
pub mod config;
pub mod task;
pub mod weights;

pub use bundle::{
    load_bundle, save_bundle, AttentionWeights, FeedForwardWeights, LayerWeights, ModelBundle, ModelWeights,
    NormWeights, StackKind, StackWeights, Vocabulary,
};
pub use config::{Arch, AttnScale, ModelConfig, NormKind, PositionMode};
pub use task::{load_task, write_task, Example, McInstance, Section};
pub use weights::{Tensor, TensorMap};
