//! Objective, optimiser, schedule, training loop and checkpoint persistence.

pub mod checkpoint;
mod loss;
mod optim;
mod state;
mod trainer;

pub use checkpoint::{peek_meta, Checkpoint, CheckpointMeta, FORMAT_VERSION};
pub use loss::{objective, Objective};
pub use optim::{clip_global_norm, lr_schedule, AdamW, OptimizerState};
pub use state::{
    backbone_from_checkpoint, backbone_to_checkpoint, ModelSnapshot, TrainState, BACKBONE_KIND,
    PROMPT_MODEL_KIND,
};
pub use trainer::{
    evaluate_fixed, pretrain_backbone, save_backbone, train, validation_noise, EvalStats,
    MetricRecord, Split, TrainConfig, TrainOutcome, TrainSink, BEST_CHECKPOINT, FINAL_CHECKPOINT,
    LAST_GOOD_CHECKPOINT, METRICS_FILE,
};
