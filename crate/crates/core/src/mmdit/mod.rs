//! The multimodal diffusion transformer that predicts flow velocities.

mod bundle;
mod checkpoint;
mod config;
mod model;
mod params;

pub use bundle::{ConditionBundle, Modality};
pub use checkpoint::{write_atomic, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Upsample};
pub use model::{
    forward, forward_graph, gated_fuse, global_condition, multi_stream_block, single_stream_block, timestep_embed,
    timestep_features, timestep_features_dt, upsample_matrix, Bound, Model, Streams, TIME_SCALE,
};
pub use params::{count_params, param_shapes, ModelParams, PreparedParams, STREAMS};
