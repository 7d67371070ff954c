//! Differentiable predictors and their checkpoint format.

mod checkpoint;
mod mlp;
mod qa;

pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use mlp::{argmax, MlpClassifier, MlpConfig};
pub use qa::{Annotations, QaConfig, QaForward, QaInstance, QaModel};
