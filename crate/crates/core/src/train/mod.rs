//! Staged training: sample assembly, the per-step update, the three-stage
//! protocol, checkpoints, and held-out evaluation.

mod adam;
pub mod checkpoint;
mod eval;
mod run;
mod sample;
mod stage;

pub use adam::{adam_update, AdamConfig, Moments};
pub use eval::{answer_token_losses, eval_ntp, eval_qa_accuracy, greedy_decode, KindScore, QaReport, DEFAULT_DECODE_CAP};
pub use run::{DataConfig, Datasets, Mechanisms, ObjectiveConfig, Preset, RunConfig, StageSchedule};
pub use sample::{build_pool, build_pool_with, samples_from_records, MultimodalSample};
pub use stage::{
    draw_batch, draw_slot, run_stage, run_stage_until, train_step, StageConfig, StageData, StageSink, TrainState,
    TRAINABLE_LATER, TRAINABLE_STAGE1,
};
