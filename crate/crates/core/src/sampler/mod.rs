//! Fixed-step ODE sampling of the velocity field with classifier-free or
//! per-modality guidance, and region-constrained editing.

mod guidance;
mod ode;

pub use guidance::{guided_velocity, GuidanceMode, GuidanceSpec, VelocityField};
pub use ode::{edit_sample, initial_noise, integrate, sample, SampleRecord, SampleSpec, Solver};
