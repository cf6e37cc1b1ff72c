//! Rectified-flow training: straight-path interpolation, velocity
//! regression, per-unit condition dropout, editing tasks built by masking the
//! audio context, AdamW with an EMA shadow, and resumable checkpoints.

mod config;
mod loss;
mod optim;
mod tasks;
mod train;

pub use config::{TrainConfig, TrainMode};
pub use loss::{cfm_loss, example_gradients, sample_example, velocity_loss, Example};
pub use optim::{ema_update, AdamW};
pub use tasks::{
    drop_cot_row, dropout_conditions, edit_bundle, event_edit, extend_tail, inpaint_span, interpolate,
    mask_audio_context, target_velocity, EditExample, EditOp,
};
pub use train::{
    read_loss_log, train, train_step, train_to_dir, StepLog, TrainingState, EMA_CHECKPOINT, FINAL_STEM, LOSS_LOG,
    OPTIMIZER_MAGIC, OPTIMIZER_VERSION,
};
