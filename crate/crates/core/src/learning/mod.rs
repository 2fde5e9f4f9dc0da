//! Learning normal-form dictionaries by minimizing the invariance
//! proximity, and the end-to-end identification pipeline.

mod loss;
mod pipeline;
mod train;

pub use loss::{
    baseline_loss, baseline_loss_grad, consistency_loss, param_norm, trace_loss_grad, BaselineKind,
    LossMode, DEFAULT_RIDGE,
};
pub use pipeline::{pipeline, state_only, PipelineConfig, PipelineOutcome};
pub use train::{
    batch_loss_grad, train, train_baseline, train_from, Adam, EpochRecord, Objective, TrainConfig,
    TrainReport, MAX_CONSECUTIVE_NON_FINITE,
};
