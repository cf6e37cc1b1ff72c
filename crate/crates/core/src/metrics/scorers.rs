//! Seeded stand-ins for the pretrained evaluation networks. Each is a frozen
//! affine map plus a nonlinearity; the ones that must recognise event types
//! read the world's signature tables.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::synthdata::World;
use crate::tensor::Tensor;

use super::divergence::{floor_normalize, SyncScorer};

/// Width of the distribution-level embedding used for FD.
pub const EMBED_DIM: usize = 8;
/// Width of the shared audio/text space used for CLAP-style scores.
pub const SHARED_DIM: usize = 16;
/// Inverse temperature of the event classifier.
pub const CLASSIFIER_SHARPNESS: f64 = 8.0;

#[derive(Debug, Clone)]
pub struct ScorerSuite {
    pub seed: u64,
    clip_seconds: f64,
    latent_len: usize,
    latent_dim: usize,
    audio_signatures: Vec<Vec<f64>>,
    visual_signatures: Vec<Vec<f64>>,
    ambient: Vec<f64>,
    /// text_dim × (K + 2)
    cot_decoder: DMatrix<f64>,
    /// caption_dim × K
    caption_decoder: DMatrix<f64>,
    /// K × SHARED_DIM
    shared_w: Vec<Vec<f64>>,
    shared_b: Vec<f64>,
}

fn pinv(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let (r, c) = (rows.len(), rows[0].len());
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    DMatrix::from_row_slice(r, c, &flat)
        .pseudo_inverse(1e-10)
        .map_err(|e| Error::Numeric(format!("pseudo-inverse failed: {e}")))
}

fn l1_normalize(h: &[f64]) -> Vec<f64> {
    let z: f64 = h.iter().sum();
    if z > 1e-12 {
        h.iter().map(|v| v / z).collect()
    } else {
        vec![0.0; h.len()]
    }
}

/// Mean over rows of relu(⟨row, s⟩) / ‖s‖² for each signature s.
fn activation(rows: impl Iterator<Item = Vec<f64>>, sigs: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; sigs.len()];
    let mut n = 0usize;
    for row in rows {
        for (a, s) in acc.iter_mut().zip(sigs) {
            let dot: f64 = row.iter().zip(s).map(|(x, y)| x * y).sum();
            let ss: f64 = s.iter().map(|v| v * v).sum();
            *a += dot.max(0.0) / ss;
        }
        n += 1;
    }
    acc.iter().map(|a| a / n.max(1) as f64).collect()
}

impl ScorerSuite {
    pub fn from_world(world: &World, seed: u64) -> Result<Self> {
        let c = &world.config;
        let mut rng = Rng::new(seed ^ 0x5C0_4E55);
        let shared_w = (0..c.event_types)
            .map(|_| (0..SHARED_DIM).map(|_| 2.0 * rng.normal()).collect())
            .collect();
        let shared_b = (0..SHARED_DIM).map(|_| 0.1 * rng.normal()).collect();
        Ok(Self {
            seed,
            clip_seconds: c.clip_seconds,
            latent_len: c.latent_len,
            latent_dim: c.latent_dim,
            audio_signatures: world.audio_signatures.clone(),
            visual_signatures: world.visual_signatures.clone(),
            ambient: world.ambient.to_f64(),
            cot_decoder: pinv(&world.cot_projection)?,
            caption_decoder: pinv(&world.caption_projection)?,
            shared_w,
            shared_b,
        })
    }

    pub fn event_types(&self) -> usize {
        self.audio_signatures.len()
    }

    pub fn clip_seconds(&self) -> f64 {
        self.clip_seconds
    }

    fn check_latent(&self, latent: &Tensor) -> Result<()> {
        if latent.shape() != [self.latent_len, self.latent_dim] {
            return Err(Error::shape(
                "scorer",
                latent.shape(),
                &[self.latent_len, self.latent_dim],
            ));
        }
        Ok(())
    }

    /// Clip-level embedding of channels `[lo, hi)`: per-channel mean, std,
    /// first-half mean and second-half mean through a seeded tanh layer.
    pub fn embed_channels(&self, latent: &Tensor, lo: usize, hi: usize) -> Result<Vec<f64>> {
        let (l, d) = latent.dims2()?;
        if lo >= hi || hi > d || l < 2 {
            return Err(Error::contract(format!(
                "cannot embed channels [{lo}, {hi}) of a {l}×{d} latent"
            )));
        }
        let w = hi - lo;
        let col = |c: usize, r0: usize, r1: usize| -> f64 {
            (r0..r1).map(|r| latent.row(r)[c] as f64).sum::<f64>() / (r1 - r0) as f64
        };
        let mut feats = Vec::with_capacity(4 * w);
        for c in lo..hi {
            feats.push(col(c, 0, l));
        }
        for c in lo..hi {
            let m = col(c, 0, l);
            let var = (0..l).map(|r| (latent.row(r)[c] as f64 - m).powi(2)).sum::<f64>() / l as f64;
            feats.push(var.sqrt());
        }
        for c in lo..hi {
            feats.push(col(c, 0, l / 2));
        }
        for c in lo..hi {
            feats.push(col(c, l / 2, l));
        }
        let mut rng = Rng::new(self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ w as u64);
        let std = 1.0 / ((4 * w) as f64).sqrt();
        let mut out = vec![0.0; EMBED_DIM];
        for f in &feats {
            for o in out.iter_mut() {
                *o += f * std * rng.normal();
            }
        }
        for o in out.iter_mut() {
            *o = (*o + 0.1 * rng.normal()).tanh();
        }
        Ok(out)
    }

    pub fn embed(&self, latent: &Tensor) -> Result<Vec<f64>> {
        let (_, d) = latent.dims2()?;
        self.embed_channels(latent, 0, d)
    }

    /// Left and right halves of the channel axis.
    pub fn embed_stereo(&self, latent: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let (_, d) = latent.dims2()?;
        if d < 2 {
            return Err(Error::contract("stereo embedding needs at least 2 channels"));
        }
        Ok((
            self.embed_channels(latent, 0, d / 2)?,
            self.embed_channels(latent, d / 2, d)?,
        ))
    }

    /// Per-type activation of the non-ambient part of a latent.
    pub fn audio_activation(&self, latent: &Tensor) -> Result<Vec<f64>> {
        self.check_latent(latent)?;
        let d = self.latent_dim;
        let rows = (0..self.latent_len).map(|r| {
            latent
                .row(r)
                .iter()
                .zip(&self.ambient[r * d..(r + 1) * d])
                .map(|(x, a)| *x as f64 - a)
                .collect()
        });
        Ok(activation(rows, &self.audio_signatures))
    }

    /// Class distribution over event types, floored and renormalized.
    pub fn classify(&self, latent: &Tensor) -> Result<Vec<f64>> {
        let act = self.audio_activation(latent)?;
        let m = act.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = act.iter().map(|a| (CLASSIFIER_SHARPNESS * (a - m)).exp()).collect();
        let z: f64 = e.iter().sum();
        Ok(floor_normalize(&e.iter().map(|v| v / z).collect::<Vec<_>>()))
    }

    fn shared(&self, h: &[f64]) -> Vec<f64> {
        let h = l1_normalize(h);
        (0..SHARED_DIM)
            .map(|j| {
                let s: f64 = h.iter().zip(&self.shared_w).map(|(x, w)| x * w[j]).sum();
                (s + self.shared_b[j]).tanh()
            })
            .collect()
    }

    pub fn align_audio(&self, latent: &Tensor) -> Result<Vec<f64>> {
        Ok(self.shared(&self.audio_activation(latent)?))
    }

    pub fn align_video(&self, video: &Tensor) -> Result<Vec<f64>> {
        let (l, _) = video.dims2()?;
        let rows = (0..l).map(|r| video.row(r).iter().map(|&v| v as f64).collect());
        Ok(self.shared(&activation(rows, &self.visual_signatures)))
    }

    /// Decodes each CoT token back to its type scores.
    pub fn align_cot(&self, tokens: &Tensor) -> Result<Vec<f64>> {
        let (l, td) = tokens.dims2()?;
        if td != self.cot_decoder.nrows() {
            return Err(Error::shape(
                "align_cot",
                tokens.shape(),
                &[l, self.cot_decoder.nrows()],
            ));
        }
        let k = self.event_types();
        let t = DMatrix::from_row_slice(l, td, &tokens.to_f64());
        let u = t * &self.cot_decoder;
        let h: Vec<f64> = (0..k).map(|c| (0..l).map(|r| u[(r, c)].max(0.0)).sum()).collect();
        Ok(self.shared(&h))
    }

    pub fn align_caption(&self, caption: &Tensor) -> Result<Vec<f64>> {
        let cd = self.caption_decoder.nrows();
        if caption.shape() != [cd] {
            return Err(Error::shape("align_caption", caption.shape(), &[cd]));
        }
        let c = DMatrix::from_row_slice(1, cd, &caption.to_f64());
        let u = c * &self.caption_decoder;
        let h: Vec<f64> = u.iter().map(|v| v.max(0.0)).collect();
        Ok(self.shared(&h))
    }
}

fn resample(env: &[f64], len: usize) -> Vec<f64> {
    let n = env.len();
    (0..len)
        .map(|j| {
            if n == 1 || len == 1 {
                return env[0];
            }
            let pos = j as f64 * (n - 1) as f64 / (len - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let w = pos - lo as f64;
            (1.0 - w) * env[lo] + w * env[hi]
        })
        .collect()
}

impl SyncScorer for ScorerSuite {
    /// Lag (in seconds) between the audio onset envelope and the sync
    /// envelope that maximizes their cross-correlation.
    fn score(&self, audio: &Tensor, sync: &Tensor) -> Result<f64> {
        let (la, _) = audio.dims2()?;
        let (ls, _) = sync.dims2()?;
        if la == 0 || ls == 0 {
            return Err(Error::EmptyInput {
                op: "sync_score",
                detail: format!("audio {la} frames, sync {ls} frames"),
            });
        }
        let energy: Vec<f64> = (0..la)
            .map(|r| audio.row(r).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
            .collect();
        let flux: Vec<f64> = (0..la)
            .map(|r| {
                if r == 0 {
                    energy[0]
                } else {
                    (energy[r] - energy[r - 1]).max(0.0)
                }
            })
            .collect();
        let env: Vec<f64> = (0..ls).map(|r| sync.row(r).iter().map(|&v| v as f64).sum()).collect();
        let env = resample(&env, la);
        let max_lag = (la / 4).max(1) as isize;
        let mut best = (f64::NEG_INFINITY, 0isize);
        for mag in 0..=max_lag {
            for lag in [-mag, mag] {
                let c: f64 = (0..la as isize)
                    .filter(|j| (0..la as isize).contains(&(j - lag)))
                    .map(|j| flux[j as usize] * env[(j - lag) as usize])
                    .sum();
                if c > best.0 + 1e-12 {
                    best = (c, lag);
                }
            }
        }
        Ok(best.1.unsigned_abs() as f64 * self.clip_seconds / self.latent_len as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::divergence::clap_score;
    use crate::synthdata::{Event, EventScript, WorldConfig};

    fn world() -> World {
        World::new(WorldConfig::default()).unwrap()
    }

    #[test]
    fn same_seed_same_scores() {
        let w = world();
        let a = ScorerSuite::from_world(&w, 3).unwrap();
        let b = ScorerSuite::from_world(&w, 3).unwrap();
        let x = Tensor::randn(&[8, 4], &mut Rng::new(1));
        assert_eq!(a.embed(&x).unwrap(), b.embed(&x).unwrap());
        assert_eq!(a.classify(&x).unwrap(), b.classify(&x).unwrap());
        let c = ScorerSuite::from_world(&w, 4).unwrap();
        assert_ne!(a.embed(&x).unwrap(), c.embed(&x).unwrap());
    }

    #[test]
    fn classifier_is_a_floored_simplex() {
        let w = world();
        let s = ScorerSuite::from_world(&w, 0).unwrap();
        let mut rng = Rng::new(2);
        for _ in 0..50 {
            let p = s.classify(&Tensor::randn(&[8, 4], &mut rng).scale(3.0)).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(p.iter().all(|&v| v >= 1e-9 * 0.999));
        }
    }

    #[test]
    fn matching_cot_aligns_better_than_mismatched() {
        let w = world();
        let s = ScorerSuite::from_world(&w, 0).unwrap();
        let ev = |t| Event {
            event_type: t,
            onset: 0.1,
            duration: 0.8,
            amplitude: 1.2,
        };
        let mut wins = 0;
        for t in 0..4 {
            let clean = w.clean_latent(&EventScript::new(vec![ev(t)])).unwrap();
            let own = w.cot_tokens(&[ev(t)], &mut Rng::new(0));
            let other = w.cot_tokens(&[ev((t + 1) % 4)], &mut Rng::new(0));
            let a = s.align_audio(&clean).unwrap();
            if clap_score(&a, &s.align_cot(&own).unwrap()).unwrap()
                > clap_score(&a, &s.align_cot(&other).unwrap()).unwrap()
            {
                wins += 1;
            }
            assert!(s.classify(&clean).unwrap()[t] > 0.25);
        }
        assert_eq!(wins, 4);
    }
}
