//! Minimal trainable point detector exercising the combined objective.
//!
//! The model is deliberately small so every gradient can be checked
//! against finite differences: fixed 9-component patch descriptors feed a
//! learned linear projection into embedding space, and linear heads on
//! those embeddings produce per-cell objectness, center offsets, and —
//! when contextual refinement is active — a merged object+context score.
//! Plain SGD, no momentum, fully deterministic given the seed.

mod model;
mod snapshot;
mod train;

pub use model::{
    extract_features, patch_descriptor, predict, Detection, ModelParams, PredictOptions,
    DESCRIPTOR_DIM,
};
pub use snapshot::{read_snapshot, write_snapshot, Snapshot, SNAPSHOT_VERSION};
pub use train::{
    eval_view, loss_and_grads, train, CrBoxSource, EpochLog, Gradients, LossBreakdown,
    TrainConfig, TrainOutcome, TrainerState,
};
