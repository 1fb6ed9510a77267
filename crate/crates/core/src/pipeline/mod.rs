//! Two-stage training, the seen/unseen ensemble, semantic inference and
//! evaluation.

mod config;
mod ensemble;
mod eval;
mod inference;
mod train;

pub use config::{EnsembleConfig, MatcherKind, TrainConfig, TrainStage, DEFAULT_LEARNING_RATE};
pub use ensemble::geometric_ensemble;
pub use eval::{
    class_ious, eval_scenes, evaluate, extract, EvalReport, EvalSettings, ExtractorKind, InVocabSource,
    SegmentationMasks,
};
pub use inference::{semantic_inference, VOID_LABEL};
pub use train::{loss_gradient, predicted_masks, train_mixed, train_warmup, StepLog, TrainLog};
