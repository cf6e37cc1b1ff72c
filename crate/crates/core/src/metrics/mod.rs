//! Objective metrics: Fréchet distance (mono and stereo), label KL,
//! CLAP-style cosine, windowed DeSync, and seeded stand-in scorers.

mod divergence;
mod report;
mod scorers;
mod stats;

pub use divergence::{
    clap_score, desync, desync_windows, floor_normalize, kl, kl_labels, round_half_up, KlDirection, SyncScorer,
    PROB_FLOOR,
};
pub use report::{evaluate, EvalFlags, EvalItem, MetricReport, Protocol, DESYNC_WINDOW_SECONDS};
pub use scorers::{ScorerSuite, CLASSIFIER_SHARPNESS, EMBED_DIM, SHARED_DIM};
pub use stats::{embed_stats, frechet_distance, sqrtm_psd, stereo_fd, EmbedStats};
