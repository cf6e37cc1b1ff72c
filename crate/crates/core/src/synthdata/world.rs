use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmdit::{ConditionBundle, ModelConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    /// Size of the event vocabulary (K).
    pub event_types: usize,
    pub latent_len: usize,
    pub latent_dim: usize,
    /// Video frames per clip; must not exceed `latent_len`.
    pub video_len: usize,
    pub video_dim: usize,
    pub text_dim: usize,
    pub caption_dim: usize,
    pub sync_dim: usize,
    /// Std of the per-record Gaussian noise added to x1.
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default = "default_max_events")]
    pub max_events: usize,
    #[serde(default = "default_clip_seconds")]
    pub clip_seconds: f64,
    /// Probability that a CoT token is rendered with a wrong event type.
    #[serde(default)]
    pub cot_jitter: f64,
}

fn default_max_events() -> usize {
    3
}

fn default_clip_seconds() -> f64 {
    9.1
}

impl Default for WorldConfig {
    /// Matches the toy model preset.
    fn default() -> Self {
        Self {
            event_types: 4,
            latent_len: 8,
            latent_dim: 4,
            video_len: 4,
            video_dim: 8,
            text_dim: 8,
            caption_dim: 8,
            sync_dim: 4,
            noise_sigma: 0.05,
            seed: 0,
            max_events: default_max_events(),
            clip_seconds: default_clip_seconds(),
            cot_jitter: 0.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("event_types", self.event_types),
            ("latent_len", self.latent_len),
            ("latent_dim", self.latent_dim),
            ("video_len", self.video_len),
            ("video_dim", self.video_dim),
            ("text_dim", self.text_dim),
            ("caption_dim", self.caption_dim),
            ("sync_dim", self.sync_dim),
        ];
        for (key, v) in dims {
            if v < 2 {
                return Err(Error::config(format!("world.{key}"), "must be at least 2"));
            }
        }
        if self.video_len > self.latent_len {
            return Err(Error::config("world.video_len", "must not exceed latent_len"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("world.noise_sigma", "must be finite and non-negative"));
        }
        if self.max_events == 0 {
            return Err(Error::config("world.max_events", "must be positive"));
        }
        if !(self.clip_seconds > 0.0 && self.clip_seconds.is_finite()) {
            return Err(Error::config("world.clip_seconds", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cot_jitter) {
            return Err(Error::config("world.cot_jitter", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Copies the feature dimensions into a model config.
    pub fn apply_to(&self, m: &mut ModelConfig) {
        m.latent_len = self.latent_len;
        m.latent_dim = self.latent_dim;
        m.video_dim = self.video_dim;
        m.text_dim = self.text_dim;
        m.caption_dim = self.caption_dim;
        m.sync_dim = self.sync_dim;
    }

    /// Errors naming the first feature dimension the model disagrees on.
    pub fn check_model(&self, m: &ModelConfig) -> Result<()> {
        let pairs = [
            ("latent_len", self.latent_len, m.latent_len),
            ("latent_dim", self.latent_dim, m.latent_dim),
            ("video_dim", self.video_dim, m.video_dim),
            ("text_dim", self.text_dim, m.text_dim),
            ("caption_dim", self.caption_dim, m.caption_dim),
            ("sync_dim", self.sync_dim, m.sync_dim),
        ];
        for (key, w, mm) in pairs {
            if w != mm {
                return Err(Error::config(
                    format!("model.{key}"),
                    format!("model has {mm}, dataset world has {w}"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Event {
    pub event_type: usize,
    /// Start as a fraction of the clip.
    pub onset: f64,
    /// Length as a fraction of the clip.
    pub duration: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventScript {
    pub events: Vec<Event>,
    #[serde(default = "default_clip_seconds")]
    pub clip_seconds: f64,
}

impl EventScript {
    pub fn new(events: Vec<Event>) -> Self {
        Self {
            events,
            clip_seconds: default_clip_seconds(),
        }
    }

    pub fn validate(&self, world: &WorldConfig) -> Result<()> {
        if self.events.is_empty() || self.events.len() > world.max_events {
            return Err(Error::contract(format!(
                "script has {} events, allowed 1..={}",
                self.events.len(),
                world.max_events
            )));
        }
        for (i, e) in self.events.iter().enumerate() {
            if e.event_type >= world.event_types {
                return Err(Error::contract(format!(
                    "event {i}: type {} out of range",
                    e.event_type
                )));
            }
            let ok = (0.0..1.0).contains(&e.onset)
                && e.duration > 0.0
                && e.onset + e.duration <= 1.0
                && e.amplitude >= 0.0
                && e.amplitude.is_finite();
            if !ok {
                return Err(Error::contract(format!("event {i}: invalid timing or amplitude {e:?}")));
            }
        }
        Ok(())
    }

    /// Multiset of event types as counts.
    pub fn type_counts(&self, k: usize) -> Vec<f64> {
        let mut c = vec![0.0; k];
        for e in &self.events {
            c[e.event_type] += 1.0;
        }
        c
    }
}

/// Raised-cosine window over [onset, onset + duration] evaluated at `u`.
pub fn bump(e: &Event, u: f64) -> f64 {
    if u < e.onset || u > e.onset + e.duration {
        return 0.0;
    }
    0.5 * (1.0 - libm::cos(2.0 * std::f64::consts::PI * (u - e.onset) / e.duration))
}

fn frame_center(j: usize, len: usize) -> f64 {
    (j as f64 + 0.5) / len as f64
}

/// Frozen tables of a world: every per-type signature and projection.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    /// K × latent_dim
    pub audio_signatures: Vec<Vec<f64>>,
    /// K × video_dim
    pub visual_signatures: Vec<Vec<f64>>,
    /// latent_len × latent_dim, shared by every clip
    pub ambient: Tensor,
    /// K × caption_dim
    pub caption_projection: Vec<Vec<f64>>,
    /// (K + 2) × text_dim: type one-hot, onset, amplitude
    pub cot_projection: Vec<Vec<f64>>,
}

fn gaussian_rows(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| std * rng.normal()).collect())
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Output of [`World::render`].
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub bundle: ConditionBundle,
    pub x1: Tensor,
    pub event_components: Vec<Tensor>,
    /// σ-scaled noise actually added to x1.
    pub noise: Tensor,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let mut root = Rng::new(config.seed);
        let k = config.event_types;
        let audio_signatures = gaussian_rows(k, config.latent_dim, 1.0, &mut root.fork());
        let visual_signatures = gaussian_rows(k, config.video_dim, 1.0, &mut root.fork());
        let ambient = Tensor::randn(&[config.latent_len, config.latent_dim], &mut root.fork()).scale(0.1);
        let caption_projection = gaussian_rows(k, config.caption_dim, 1.0, &mut root.fork());
        let cot_projection = gaussian_rows(k + 2, config.text_dim, 1.0, &mut root.fork());
        Ok(Self {
            config,
            audio_signatures,
            visual_signatures,
            ambient,
            caption_projection,
            cot_projection,
        })
    }

    /// Two types may share a clip iff their audio signatures have cosine
    /// similarity below 0.3.
    pub fn distinct(&self, a: usize, b: usize) -> bool {
        a != b && cosine(&self.audio_signatures[a], &self.audio_signatures[b]) < 0.3
    }

    /// Random script: 1..=max_events events, later types distinct from
    /// earlier ones where the vocabulary allows it.
    pub fn random_script(&self, rng: &mut Rng) -> EventScript {
        let c = &self.config;
        let n = 1 + rng.below(c.max_events);
        let mut events: Vec<Event> = Vec::with_capacity(n);
        for _ in 0..n {
            let pool: Vec<usize> = (0..c.event_types)
                .filter(|&t| events.iter().all(|e| self.distinct(e.event_type, t)))
                .collect();
            let event_type = if pool.is_empty() {
                rng.below(c.event_types)
            } else {
                pool[rng.below(pool.len())]
            };
            let onset = rng.uniform_range(0.0, 0.7);
            let duration = rng.uniform_range(0.2, 1.0 - onset);
            let amplitude = rng.uniform_range(0.5, 1.5);
            events.push(Event {
                event_type,
                onset,
                duration,
                amplitude,
            });
        }
        EventScript {
            events,
            clip_seconds: c.clip_seconds,
        }
    }

    /// Latent contribution of one event.
    pub fn event_component(&self, e: &Event) -> Tensor {
        let (l, d) = (self.config.latent_len, self.config.latent_dim);
        let sig = &self.audio_signatures[e.event_type];
        let mut data = Vec::with_capacity(l * d);
        for j in 0..l {
            let w = e.amplitude * bump(e, frame_center(j, l));
            data.extend(sig.iter().map(|s| (w * s) as f32));
        }
        Tensor::new(vec![l, d], data).expect("shape matches data")
    }

    /// Video features of the given events, [video_len × video_dim].
    pub fn video_features(&self, events: &[Event]) -> Tensor {
        let (lv, vd) = (self.config.video_len, self.config.video_dim);
        let mut data = vec![0.0f64; lv * vd];
        for e in events {
            let sig = &self.visual_signatures[e.event_type];
            for i in 0..lv {
                let w = e.amplitude * bump(e, frame_center(i, lv));
                for (c, s) in sig.iter().enumerate() {
                    data[i * vd + c] += w * s;
                }
            }
        }
        Tensor::from_f64(&[lv, vd], &data)
    }

    /// Onset indicators on channel `type mod sync_dim`, smoothed by [¼, ½, ¼].
    pub fn sync_features(&self, events: &[Event]) -> Tensor {
        let (lv, sd) = (self.config.video_len, self.config.sync_dim);
        let mut raw = vec![0.0f64; lv * sd];
        for e in events {
            let i = ((e.onset * lv as f64).floor() as usize).min(lv - 1);
            raw[i * sd + e.event_type % sd] = 1.0;
        }
        let mut out = vec![0.0f64; lv * sd];
        for i in 0..lv {
            for c in 0..sd {
                let at = |j: isize| -> f64 {
                    if j < 0 || j >= lv as isize {
                        0.0
                    } else {
                        raw[j as usize * sd + c]
                    }
                };
                let i = i as isize;
                out[i as usize * sd + c] = 0.25 * at(i - 1) + 0.5 * at(i) + 0.25 * at(i + 1);
            }
        }
        Tensor::from_f64(&[lv, sd], &out)
    }

    pub fn caption_embedding(&self, script: &EventScript) -> Tensor {
        let counts = script.type_counts(self.config.event_types);
        let cd = self.config.caption_dim;
        let v: Vec<f64> = (0..cd)
            .map(|c| {
                counts
                    .iter()
                    .zip(&self.caption_projection)
                    .map(|(n, row)| n * row[c])
                    .sum()
            })
            .collect();
        Tensor::from_f64(&[cd], &v)
    }

    /// One token per event; with probability `cot_jitter` a token carries a
    /// wrong type.
    pub fn cot_tokens(&self, events: &[Event], rng: &mut Rng) -> Tensor {
        let (k, td) = (self.config.event_types, self.config.text_dim);
        let mut data = Vec::with_capacity(events.len() * td);
        for e in events {
            let mut ty = e.event_type;
            if self.config.cot_jitter > 0.0 && rng.bernoulli(self.config.cot_jitter) {
                ty = (ty + 1 + rng.below(k - 1)) % k;
            }
            for c in 0..td {
                let v = self.cot_projection[ty][c]
                    + e.onset * self.cot_projection[k][c]
                    + e.amplitude * self.cot_projection[k + 1][c];
                data.push(v as f32);
            }
        }
        Tensor::new(vec![events.len(), td], data).expect("shape matches data")
    }

    /// Full conditions and latent for a script. Summation order of x1 is
    /// components in event order, then ambient, then noise.
    pub fn render(&self, script: &EventScript, rng: &mut Rng) -> Result<Rendered> {
        script.validate(&self.config)?;
        let components: Vec<Tensor> = script.events.iter().map(|e| self.event_component(e)).collect();
        let noise =
            Tensor::randn(&[self.config.latent_len, self.config.latent_dim], rng).scale(self.config.noise_sigma as f32);
        let x1 = reassemble(&components, &self.ambient, &noise)?;
        let bundle = ConditionBundle {
            video_feats: Some(self.video_features(&script.events)),
            caption_emb: Some(self.caption_embedding(script)),
            cot_tokens: Some(self.cot_tokens(&script.events, rng)),
            sync_feats: Some(self.sync_features(&script.events)),
            roi_feats: Some(self.video_features(&script.events[..1])),
            audio_context: None,
            context_mask: None,
        };
        Ok(Rendered {
            bundle,
            x1,
            event_components: components,
            noise,
        })
    }

    /// Noise-free latent of a script: its conditional mean.
    pub fn clean_latent(&self, script: &EventScript) -> Result<Tensor> {
        let components: Vec<Tensor> = script.events.iter().map(|e| self.event_component(e)).collect();
        let zero = Tensor::zeros(self.ambient.shape());
        reassemble(&components, &self.ambient, &zero)
    }

    /// ROI track isolating event `index` of a script.
    pub fn roi_features(&self, script: &EventScript, index: usize) -> Result<Tensor> {
        let e = script
            .events
            .get(index)
            .ok_or_else(|| Error::contract(format!("script has no event {index}")))?;
        Ok(self.video_features(std::slice::from_ref(e)))
    }
}

/// Σ components, then ambient, then noise, in that order.
pub fn reassemble(components: &[Tensor], ambient: &Tensor, noise: &Tensor) -> Result<Tensor> {
    let mut acc = Tensor::zeros(ambient.shape());
    for c in components {
        acc = acc.add(c)?;
    }
    acc.add(ambient)?.add(noise)
}
