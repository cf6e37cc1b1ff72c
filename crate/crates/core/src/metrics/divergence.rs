use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability floor applied before renormalizing.
pub const PROB_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(reference ‖ generated)
    #[default]
    ReferenceToGenerated,
    /// KL(generated ‖ reference)
    GeneratedToReference,
}

/// Floors at [`PROB_FLOOR`] and renormalizes.
pub fn floor_normalize(p: &[f64]) -> Vec<f64> {
    let f: Vec<f64> = p.iter().map(|&v| v.max(PROB_FLOOR)).collect();
    let z: f64 = f.iter().sum();
    f.iter().map(|v| v / z).collect()
}

/// Σ p ln(p / q) after flooring both sides.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("kl", &[p.len()], &[q.len()]));
    }
    let (p, q) = (floor_normalize(p), floor_normalize(q));
    Ok(p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum())
}

/// Mean of per-pair divergences between generated and reference class
/// distributions.
pub fn kl_labels(generated: &[Vec<f64>], reference: &[Vec<f64>], dir: KlDirection) -> Result<f64> {
    if generated.len() != reference.len() {
        return Err(Error::contract(format!(
            "kl_labels: {} generated vs {} reference distributions",
            generated.len(),
            reference.len()
        )));
    }
    if generated.is_empty() {
        return Err(Error::EmptyInput {
            op: "kl_labels",
            detail: "no pairs".into(),
        });
    }
    let mut total = 0.0;
    for (g, r) in generated.iter().zip(reference) {
        total += match dir {
            KlDirection::ReferenceToGenerated => kl(r, g)?,
            KlDirection::GeneratedToReference => kl(g, r)?,
        };
    }
    Ok(total / generated.len() as f64)
}

/// Cosine similarity.
pub fn clap_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("clap_score", &[a.len()], &[b.len()]));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::domain("clap_score of a zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// floor(x + 0.5)
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// First and last windows of `window_seconds` within a clip of `len` frames,
/// as half-open frame ranges.
pub fn desync_windows(clip_seconds: f64, window_seconds: f64, len: usize) -> Result<[(usize, usize); 2]> {
    if !(window_seconds > 0.0) || clip_seconds < window_seconds {
        return Err(Error::contract(format!(
            "clip of {clip_seconds} s is shorter than the {window_seconds} s window"
        )));
    }
    let w = round_half_up(window_seconds / clip_seconds * len as f64).clamp(1, len);
    Ok([(0, w), (len - w, len)])
}

/// Misalignment between an audio latent window and the matching sync window.
pub trait SyncScorer {
    fn score(&self, audio: &Tensor, sync: &Tensor) -> Result<f64>;
}

impl<F: Fn(&Tensor, &Tensor) -> Result<f64>> SyncScorer for F {
    fn score(&self, audio: &Tensor, sync: &Tensor) -> Result<f64> {
        self(audio, sync)
    }
}

fn rows(t: &Tensor, (a, b): (usize, usize)) -> Result<Tensor> {
    let (_, w) = t.dims2()?;
    Tensor::new(vec![b - a, w], t.data()[a * w..b * w].to_vec())
}

/// Mean score over the first and last windows. Audio and sync tracks are
/// windowed on their own frame grids.
pub fn desync(
    latent: &Tensor,
    sync: &Tensor,
    scorer: &dyn SyncScorer,
    clip_seconds: f64,
    window_seconds: f64,
) -> Result<f64> {
    let (la, _) = latent.dims2()?;
    let (ls, _) = sync.dims2()?;
    let wa = desync_windows(clip_seconds, window_seconds, la)?;
    let ws = desync_windows(clip_seconds, window_seconds, ls)?;
    let first = scorer.score(&rows(latent, wa[0])?, &rows(sync, ws[0])?)?;
    let last = scorer.score(&rows(latent, wa[1])?, &rows(sync, ws[1])?)?;
    Ok((first + last) / 2.0)
}
