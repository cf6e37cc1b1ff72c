use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmdit::{ConditionBundle, Modality, Model};
use crate::tensor::Tensor;

/// Anything that predicts a velocity for a latent at time t.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64, bundle: &ConditionBundle) -> Result<Tensor>;

    /// [latent_len, latent_dim] of the states this field acts on.
    fn latent_shape(&self) -> [usize; 2];
}

impl VelocityField for Model {
    fn velocity(&self, x: &Tensor, t: f64, bundle: &ConditionBundle) -> Result<Tensor> {
        self.forward(x, t, bundle)
    }

    fn latent_shape(&self) -> [usize; 2] {
        [self.config.latent_len, self.config.latent_dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// v∅ + w·(v_c − v∅) with the full bundle.
    #[default]
    Joint,
    /// v∅ + Σ_m w_m·(v_m − v∅), each v_m seeing unit m alone.
    Compositional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSpec {
    #[serde(default)]
    pub mode: GuidanceMode,
    #[serde(default = "one")]
    pub joint_weight: f64,
    #[serde(default)]
    pub per_modality: BTreeMap<Modality, f64>,
}

fn one() -> f64 {
    1.0
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self::joint(1.0)
    }
}

impl GuidanceSpec {
    pub fn joint(w: f64) -> Self {
        Self {
            mode: GuidanceMode::Joint,
            joint_weight: w,
            per_modality: BTreeMap::new(),
        }
    }

    pub fn compositional(weights: impl IntoIterator<Item = (Modality, f64)>) -> Self {
        Self {
            mode: GuidanceMode::Compositional,
            joint_weight: 1.0,
            per_modality: weights.into_iter().collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, w: f64| {
            if w.is_finite() && w >= 0.0 {
                Ok(())
            } else {
                Err(Error::domain(format!(
                    "guidance weight {name} = {w} must be finite and non-negative"
                )))
            }
        };
        match self.mode {
            GuidanceMode::Joint => check("joint", self.joint_weight),
            GuidanceMode::Compositional => self.per_modality.iter().try_for_each(|(m, &w)| check(m.name(), w)),
        }
    }

    /// (weight, bundle) terms with non-zero weight, in modality order.
    fn terms(&self, bundle: &ConditionBundle) -> Vec<(f64, ConditionBundle)> {
        match self.mode {
            GuidanceMode::Joint if self.joint_weight != 0.0 => vec![(self.joint_weight, bundle.clone())],
            GuidanceMode::Joint => Vec::new(),
            GuidanceMode::Compositional => self
                .per_modality
                .iter()
                .filter(|(m, &w)| w != 0.0 && bundle.has(**m))
                .map(|(m, &w)| (w, bundle.only(*m)))
                .collect(),
        }
    }
}

/// Guided velocity. Terms with zero weight are skipped; a single term of
/// weight one returns that conditional prediction unchanged, so `w = 1` is
/// plain conditional integration and `w = 0` plain unconditional.
pub fn guided_velocity(
    field: &dyn VelocityField,
    x: &Tensor,
    t: f64,
    bundle: &ConditionBundle,
    g: &GuidanceSpec,
) -> Result<Tensor> {
    g.validate()?;
    let terms = g.terms(bundle);
    if let [(w, b)] = terms.as_slice() {
        if *w == 1.0 {
            return field.velocity(x, t, b);
        }
    }
    let uncond = field.velocity(x, t, &ConditionBundle::empty())?;
    if terms.is_empty() {
        return Ok(uncond);
    }
    let base = uncond.to_f64();
    let mut acc = base.clone();
    for (w, b) in &terms {
        let v = field.velocity(x, t, b)?;
        for ((a, &c), &u) in acc.iter_mut().zip(v.data()).zip(&base) {
            *a += w * (c as f64 - u);
        }
    }
    Ok(Tensor::from_f64(uncond.shape(), &acc))
}
