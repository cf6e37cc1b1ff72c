//! A synthetic multimodal world with known event structure: scripts of
//! sound events rendered into aligned latents and conditioning tracks,
//! quality control, and difficulty tertiles.

mod dataset;
mod difficulty;
mod world;

pub use dataset::{
    generate, make_record, score_clip, Dataset, DatasetRecord, GenConfig, Generated, Manifest, SplitCounts,
    DATASET_MAGIC, DATASET_VERSION,
};
pub use difficulty::{
    assign_difficulty, bands, composite, human_audit_sample, qc_partition, AuditSample, Bands, Difficulty, QcLedger,
    QcOutcome, QcReport, Scores, AUDIT_FRACTION, RECALIBRATION_TRIGGER, W_CLAP, W_DESYNC, W_EVENTS, W_SEMANTIC,
};
pub use world::{bump, reassemble, Event, EventScript, Rendered, World, WorldConfig};
