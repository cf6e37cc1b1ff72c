use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmdit::{ConditionBundle, Modality};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// x_t = (1−t)·x0 + t·x1, evaluated in f64 and rounded once.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    if x0.shape() != x1.shape() {
        return Err(Error::shape("interpolate", x0.shape(), x1.shape()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(format!("interpolation time {t} outside [0, 1]")));
    }
    let data = x0
        .data()
        .iter()
        .zip(x1.data())
        .map(|(&a, &b)| ((1.0 - t) * a as f64 + t * b as f64) as f32)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// v = x1 − x0, the constant velocity of the straight path.
pub fn target_velocity(x0: &Tensor, x1: &Tensor) -> Result<Tensor> {
    if x0.shape() != x1.shape() {
        return Err(Error::shape("target_velocity", x0.shape(), x1.shape()));
    }
    x1.sub(x0)
}

/// Each conditioning unit is independently dropped with probability
/// `p_drop`. Always draws one uniform per unit, in [`Modality::ALL`] order.
pub fn dropout_conditions(bundle: &ConditionBundle, p_drop: f64, rng: &mut Rng) -> ConditionBundle {
    let mut out = bundle.clone();
    for m in Modality::ALL {
        if rng.bernoulli(p_drop) {
            out = out.without(m);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditOp {
    Inpaint,
    Extend,
    Add,
    Remove,
}

impl EditOp {
    pub const ALL: [EditOp; 4] = [EditOp::Inpaint, EditOp::Extend, EditOp::Add, EditOp::Remove];

    pub fn name(self) -> &'static str {
        match self {
            EditOp::Inpaint => "inpaint",
            EditOp::Extend => "extend",
            EditOp::Add => "add",
            EditOp::Remove => "remove",
        }
    }

    /// Inpaint and extend pin the known frames during sampling.
    pub fn is_region_constrained(self) -> bool {
        matches!(self, EditOp::Inpaint | EditOp::Extend)
    }
}

impl fmt::Display for EditOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EditOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EditOp::ALL.into_iter().find(|op| op.name() == s).ok_or_else(|| {
            Error::config(
                "op",
                format!("unknown edit operation `{s}` (inpaint, extend, add, remove)"),
            )
        })
    }
}

/// A self-supervised editing example built from a clean latent.
#[derive(Debug, Clone, PartialEq)]
pub struct EditExample {
    pub op: EditOp,
    /// Zero on hidden frames.
    pub context: Tensor,
    /// true = frame visible in the context
    pub mask: Vec<bool>,
    pub target: Tensor,
    /// Event subtracted by `add` or `remove`.
    pub event: Option<usize>,
}

fn latent_len(x1: &Tensor) -> Result<usize> {
    let (l, _) = x1.dims2()?;
    if l < 4 {
        return Err(Error::contract(format!(
            "editing needs at least 4 latent frames, got {l}"
        )));
    }
    Ok(l)
}

fn masked(x1: &Tensor, mask: &[bool]) -> Tensor {
    let mut ctx = x1.clone();
    for (i, &keep) in mask.iter().enumerate() {
        if !keep {
            ctx.row_mut(i).fill(0.0);
        }
    }
    ctx
}

/// Inpainting example hiding frames `[start, end)`.
pub fn inpaint_span(x1: &Tensor, start: usize, end: usize) -> Result<EditExample> {
    let l = latent_len(x1)?;
    if !(start < end && end <= l) {
        return Err(Error::contract(format!(
            "inpaint span [{start}, {end}) invalid for {l} frames"
        )));
    }
    let mask: Vec<bool> = (0..l).map(|i| i < start || i >= end).collect();
    Ok(EditExample {
        op: EditOp::Inpaint,
        context: masked(x1, &mask),
        mask,
        target: x1.clone(),
        event: None,
    })
}

/// Extension example keeping the first `keep` frames.
pub fn extend_tail(x1: &Tensor, keep: usize) -> Result<EditExample> {
    let l = latent_len(x1)?;
    if keep == 0 || keep >= l {
        return Err(Error::contract(format!(
            "extension must keep between 1 and {} frames, got {keep}",
            l - 1
        )));
    }
    let mask: Vec<bool> = (0..l).map(|i| i < keep).collect();
    Ok(EditExample {
        op: EditOp::Extend,
        context: masked(x1, &mask),
        mask,
        target: x1.clone(),
        event: None,
    })
}

/// Addition (context lacks event `e`) or removal (target lacks it).
pub fn event_edit(x1: &Tensor, components: &[Tensor], op: EditOp, e: usize) -> Result<EditExample> {
    let l = latent_len(x1)?;
    let c = components
        .get(e)
        .ok_or_else(|| Error::contract(format!("no event component {e} (have {})", components.len())))?;
    let without = x1.sub(c)?;
    let (context, target) = match op {
        EditOp::Add => (without, x1.clone()),
        EditOp::Remove => (x1.clone(), without),
        _ => return Err(Error::contract(format!("{op} is not an event edit"))),
    };
    Ok(EditExample {
        op,
        context,
        mask: vec![true; l],
        target,
        event: Some(e),
    })
}

/// Draws a random editing example of the requested kind. Inpainting hides an
/// interior span of 20–60% of the frames, extension the last 30–60%.
pub fn mask_audio_context(x1: &Tensor, components: &[Tensor], op: EditOp, rng: &mut Rng) -> Result<EditExample> {
    let l = latent_len(x1)?;
    match op {
        EditOp::Inpaint => {
            let lo = (20 * l).div_ceil(100).max(1);
            let hi = (60 * l / 100).min(l - 2);
            if lo > hi {
                return Err(Error::contract(format!("{l} frames leave no interior inpainting span")));
            }
            let len = lo + rng.below(hi - lo + 1);
            let start = 1 + rng.below(l - 1 - len);
            inpaint_span(x1, start, start + len)
        }
        EditOp::Extend => {
            let lo = (30 * l).div_ceil(100).max(1);
            let hi = (60 * l / 100).min(l - 1);
            if lo > hi {
                return Err(Error::contract(format!("{l} frames leave no extension span")));
            }
            let hidden = lo + rng.below(hi - lo + 1);
            extend_tail(x1, l - hidden)
        }
        EditOp::Add | EditOp::Remove => {
            if components.is_empty() {
                return Err(Error::contract(format!("{op} needs at least one event component")));
            }
            let e = rng.below(components.len());
            event_edit(x1, components, op, e)
        }
    }
}

/// CoT tokens without row `e`; `None` once no token remains.
pub fn drop_cot_row(tokens: &Tensor, e: usize) -> Result<Option<Tensor>> {
    let (rows, cols) = tokens.dims2()?;
    if e >= rows {
        return Err(Error::contract(format!("CoT has no token {e} (have {rows})")));
    }
    if rows == 1 {
        return Ok(None);
    }
    let data: Vec<f32> = (0..rows)
        .filter(|&r| r != e)
        .flat_map(|r| tokens.row(r).to_vec())
        .collect();
    Ok(Some(Tensor::new(vec![rows - 1, cols], data)?))
}

/// Bundle conditioning an editing example: the context and mask, and for
/// removal the CoT describing the edited result.
pub fn edit_bundle(bundle: &ConditionBundle, ex: &EditExample) -> Result<ConditionBundle> {
    let mut b = bundle.clone().with_context(ex.context.clone(), ex.mask.clone());
    if let (EditOp::Remove, Some(e), Some(cot)) = (ex.op, ex.event, &bundle.cot_tokens) {
        b.cot_tokens = drop_cot_row(cot, e)?;
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn ramp(l: usize, d: usize) -> Tensor {
        Tensor::new(vec![l, d], (0..l * d).map(|i| i as f32 * 0.25 - 1.0).collect()).unwrap()
    }

    #[test]
    fn interpolation_endpoints() {
        let mut rng = Rng::new(1);
        let x0 = Tensor::randn(&[8, 4], &mut rng);
        let x1 = Tensor::randn(&[8, 4], &mut rng);
        assert!(interpolate(&x0, &x1, 0.0).unwrap().bit_eq(&x0));
        assert!(interpolate(&x0, &x1, 1.0).unwrap().bit_eq(&x1));
        let z = Tensor::zeros(&[8, 4]);
        assert!(interpolate(&z, &x1, 0.5).unwrap().bit_eq(&x1.scale(0.5)));
        assert!(interpolate(&x0, &Tensor::zeros(&[4, 8]), 0.5).is_err());
        assert!(interpolate(&x0, &x1, 1.5).is_err());
    }

    #[test]
    fn midpoint_is_the_average() {
        let mut rng = Rng::new(2);
        let x0 = Tensor::randn(&[8, 4], &mut rng);
        let x1 = Tensor::randn(&[8, 4], &mut rng);
        let mid = interpolate(&x0, &x1, 0.5).unwrap();
        for ((m, a), b) in mid.data().iter().zip(x0.data()).zip(x1.data()) {
            assert_eq!(*m, ((*a as f64 + *b as f64) / 2.0) as f32);
        }
    }

    #[test]
    fn velocity_is_path_derivative() {
        let mut rng = Rng::new(3);
        let x0 = Tensor::randn(&[8, 4], &mut rng);
        let x1 = Tensor::randn(&[8, 4], &mut rng);
        let v = target_velocity(&x0, &x1).unwrap();
        assert!(target_velocity(&x1, &x1).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(target_velocity(&Tensor::zeros(&[8, 4]), &x1).unwrap().bit_eq(&x1));
        let h = 1e-2;
        for t in [0.1, 0.5, 0.9] {
            let a = interpolate(&x0, &x1, t + h).unwrap();
            let b = interpolate(&x0, &x1, t - h).unwrap();
            for ((p, q), w) in a.data().iter().zip(b.data()).zip(v.data()) {
                let fd = (*p as f64 - *q as f64) / (2.0 * h);
                assert!((fd - *w as f64).abs() < 1e-4, "{fd} vs {w}");
            }
        }
    }

    fn full_bundle() -> ConditionBundle {
        let mut rng = Rng::new(4);
        ConditionBundle {
            video_feats: Some(Tensor::randn(&[4, 8], &mut rng)),
            caption_emb: Some(Tensor::randn(&[8], &mut rng)),
            cot_tokens: Some(Tensor::randn(&[2, 8], &mut rng)),
            sync_feats: Some(Tensor::randn(&[4, 4], &mut rng)),
            roi_feats: Some(Tensor::randn(&[4, 8], &mut rng)),
            audio_context: Some(Tensor::randn(&[8, 4], &mut rng)),
            context_mask: Some(vec![true; 8]),
        }
    }

    #[test]
    fn dropout_extremes() {
        let b = full_bundle();
        let mut rng = Rng::new(5);
        assert_eq!(dropout_conditions(&b, 0.0, &mut rng), b);
        assert_eq!(dropout_conditions(&b, 1.0, &mut rng), ConditionBundle::empty());
    }

    #[test]
    fn dropout_rate_concentrates() {
        let b = full_bundle();
        let before = b.clone();
        let mut rng = Rng::new(6);
        let n = 100_000;
        let mut dropped = [0usize; 5];
        for _ in 0..n {
            let d = dropout_conditions(&b, 0.2, &mut rng);
            for (k, m) in Modality::ALL.iter().enumerate() {
                if !d.has(*m) {
                    dropped[k] += 1;
                }
            }
        }
        assert_eq!(b, before);
        for (k, c) in dropped.iter().enumerate() {
            let rate = *c as f64 / n as f64;
            assert!((0.195..=0.205).contains(&rate), "{:?}: {rate}", Modality::ALL[k]);
        }
    }

    #[test]
    fn dropped_units_go_together() {
        let b = full_bundle();
        let mut rng = Rng::new(7);
        for _ in 0..200 {
            let d = dropout_conditions(&b, 0.5, &mut rng);
            assert_eq!(d.video_feats.is_some(), d.sync_feats.is_some());
            assert_eq!(d.audio_context.is_some(), d.context_mask.is_some());
        }
    }

    #[test]
    fn inpaint_span_mask() {
        let ex = inpaint_span(&ramp(8, 2), 2, 5).unwrap();
        assert_eq!(ex.mask, vec![true, true, false, false, false, true, true, true]);
        assert!(ex.context.row(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extend_half_mask() {
        let ex = extend_tail(&ramp(8, 2), 4).unwrap();
        assert_eq!(ex.mask, vec![true, true, true, true, false, false, false, false]);
    }

    #[test]
    fn add_context_equals_remove_target() {
        let x1 = ramp(8, 2);
        let comps = vec![ramp(8, 2).scale(0.5), ramp(8, 2).scale(-0.25)];
        for e in 0..2 {
            let add = event_edit(&x1, &comps, EditOp::Add, e).unwrap();
            let rem = event_edit(&x1, &comps, EditOp::Remove, e).unwrap();
            assert!(add.context.bit_eq(&rem.target));
            assert!(add.target.bit_eq(&x1) && rem.context.bit_eq(&x1));
            assert!(add.mask.iter().all(|&m| m));
        }
    }

    #[test]
    fn too_short_latent_is_rejected() {
        let x1 = ramp(3, 2);
        let err = mask_audio_context(&x1, &[], EditOp::Inpaint, &mut Rng::new(1)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert!(mask_audio_context(&ramp(8, 2), &[], EditOp::Remove, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn removal_drops_the_cot_row() {
        let b = full_bundle();
        let x1 = ramp(8, 4);
        let comps = vec![ramp(8, 4).scale(0.1), ramp(8, 4).scale(0.2)];
        let ex = event_edit(&x1, &comps, EditOp::Remove, 1).unwrap();
        let eb = edit_bundle(&b, &ex).unwrap();
        let cot = eb.cot_tokens.unwrap();
        assert_eq!(cot.shape(), &[1, 8]);
        assert_eq!(cot.row(0), b.cot_tokens.as_ref().unwrap().row(0));
        let single = Tensor::randn(&[1, 8], &mut Rng::new(2));
        assert_eq!(drop_cot_row(&single, 0).unwrap(), None);
    }

    #[test]
    fn op_names_parse() {
        for op in EditOp::ALL {
            assert_eq!(op.name().parse::<EditOp>().unwrap(), op);
        }
        assert!("erase".parse::<EditOp>().is_err());
    }

    proptest! {
        #[test]
        fn visible_frames_match_target(l in 4usize..40, seed in 0u64..1000, extend in any::<bool>()) {
            let mut rng = Rng::new(seed);
            let x1 = Tensor::randn(&[l, 3], &mut rng);
            let op = if extend { EditOp::Extend } else { EditOp::Inpaint };
            let ex = mask_audio_context(&x1, &[], op, &mut rng).unwrap();
            let hidden = ex.mask.iter().filter(|&&m| !m).count();
            let (lo, hi) = if extend { (0.3, 0.6) } else { (0.2, 0.6) };
            prop_assert!(hidden >= 1);
            prop_assert!(hidden as f64 >= (lo * l as f64).ceil() - 1e-9 || hidden == 1);
            prop_assert!(hidden as f64 <= hi * l as f64 + 1e-9);
            if extend {
                prop_assert!(!ex.mask[l - 1]);
            } else {
                prop_assert!(ex.mask[0] && ex.mask[l - 1]);
            }
            for (i, &m) in ex.mask.iter().enumerate() {
                if m {
                    prop_assert_eq!(ex.context.row(i), ex.target.row(i));
                }
            }
        }
    }
}
