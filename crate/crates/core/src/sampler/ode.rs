use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowmatch::EditOp;
use crate::mmdit::ConditionBundle;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::guidance::{guided_velocity, GuidanceSpec, VelocityField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    #[default]
    Euler,
    Midpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSpec {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub solver: Solver,
    pub seed: u64,
    #[serde(default)]
    pub guidance: GuidanceSpec,
}

fn default_steps() -> usize {
    24
}

impl SampleSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            steps: default_steps(),
            solver: Solver::Euler,
            seed,
            guidance: GuidanceSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("sample.steps", "must be at least 1"));
        }
        self.guidance.validate()
    }
}

/// Initial noise for a seed.
pub fn initial_noise(shape: [usize; 2], seed: u64) -> Tensor {
    Tensor::randn(&shape, &mut Rng::new(seed))
}

/// Fixed-step integration of dx/dt = v(x, t) from t = 0 to 1. The state is
/// kept in f64; `v` sees it rounded to f32. `after_step(x, t)` runs after
/// each step with the time reached.
pub fn integrate(
    x0: &Tensor,
    steps: usize,
    solver: Solver,
    mut v: impl FnMut(&Tensor, f64) -> Result<Tensor>,
    mut after_step: impl FnMut(&mut [f64], f64),
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::config("sample.steps", "must be at least 1"));
    }
    let shape = x0.shape().to_vec();
    let h = 1.0 / steps as f64;
    let mut x = x0.to_f64();
    for i in 0..steps {
        let t = i as f64 / steps as f64;
        let k1 = v(&Tensor::from_f64(&shape, &x), t)?;
        match solver {
            Solver::Euler => {
                for (s, &d) in x.iter_mut().zip(k1.data()) {
                    *s += h * d as f64;
                }
            }
            Solver::Midpoint => {
                let mid: Vec<f64> = x.iter().zip(k1.data()).map(|(s, &d)| s + 0.5 * h * d as f64).collect();
                let k2 = v(&Tensor::from_f64(&shape, &mid), t + 0.5 * h)?;
                for (s, &d) in x.iter_mut().zip(k2.data()) {
                    *s += h * d as f64;
                }
            }
        }
        let t_next = (i + 1) as f64 / steps as f64;
        after_step(&mut x, t_next);
        if let Some(j) = x.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!(
                "sampling state element {j} diverged at step {}",
                i + 1
            )));
        }
    }
    Ok(Tensor::from_f64(&shape, &x))
}

/// Integrates the guided field from the seed's noise.
pub fn sample(field: &dyn VelocityField, bundle: &ConditionBundle, spec: &SampleSpec) -> Result<Tensor> {
    spec.validate()?;
    let x0 = initial_noise(field.latent_shape(), spec.seed);
    integrate(
        &x0,
        spec.steps,
        spec.solver,
        |x, t| guided_velocity(field, x, t, bundle, &spec.guidance),
        |_, _| {},
    )
}

/// Editing sample. Inpaint and extend overwrite the visible frames after
/// every step with the straight path from the fixed noise to the context, and
/// with the context itself at the end; add and remove integrate freely.
pub fn edit_sample(
    field: &dyn VelocityField,
    bundle: &ConditionBundle,
    op: EditOp,
    spec: &SampleSpec,
) -> Result<Tensor> {
    spec.validate()?;
    let (Some(ctx), Some(mask)) = (&bundle.audio_context, &bundle.context_mask) else {
        return Err(Error::contract(format!(
            "{op} needs audio_context and context_mask; produce them with stage1 or stage2 first"
        )));
    };
    let [l, d] = field.latent_shape();
    if ctx.shape() != [l, d] || mask.len() != l {
        return Err(Error::shape("edit_sample", ctx.shape(), &[l, d]));
    }
    if !op.is_region_constrained() {
        return sample(field, bundle, spec);
    }
    let x0 = initial_noise([l, d], spec.seed);
    let (noise, known) = (x0.to_f64(), ctx.to_f64());
    let pin = |x: &mut [f64], t: f64| {
        for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for c in r * d..(r + 1) * d {
                x[c] = if t >= 1.0 {
                    known[c]
                } else {
                    (1.0 - t) * noise[c] + t * known[c]
                };
            }
        }
    };
    integrate(
        &x0,
        spec.steps,
        spec.solver,
        |x, t| guided_velocity(field, x, t, bundle, &spec.guidance),
        pin,
    )
}

/// Provenance written next to every sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub seed: u64,
    pub steps: usize,
    pub solver: Solver,
    pub guidance: GuidanceSpec,
    /// SHA-256 of the serialized conditions.
    pub bundle_fingerprint: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub edit: Option<EditOp>,
}

impl SampleRecord {
    pub fn new(spec: &SampleSpec, bundle: &ConditionBundle, edit: Option<EditOp>) -> Self {
        Self {
            seed: spec.seed,
            steps: spec.steps,
            solver: spec.solver,
            guidance: spec.guidance.clone(),
            bundle_fingerprint: bundle.fingerprint(),
            edit,
        }
    }
}
