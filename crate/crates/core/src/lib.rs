//! Multimodal flow-matching audio generation at desk scale.
//!
//! Layers, bottom-up:
//! - [`tensor`], [`autograd`], [`rng`]: dense tensors, reverse-mode graph, seeded draws
//! - [`mmdit`]: the multi-stream / single-stream transformer predicting velocities
//! - [`flowmatch`]: rectified-flow training with modality dropout, editing tasks, EMA
//! - [`sampler`]: ODE integration, guidance, constrained editing
//! - [`synthdata`]: a synthetic multimodal world with known event structure
//! - [`metrics`]: Fréchet distance, label KL, CLAP-style cosine, windowed DeSync

pub mod autograd;
pub mod error;
pub mod flowmatch;
pub mod gradcheck;
pub mod json;
pub mod kernels;
pub mod metrics;
pub mod mmdit;
pub mod ops;
pub mod rng;
pub mod sampler;
pub mod synthdata;
pub mod tensor;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
