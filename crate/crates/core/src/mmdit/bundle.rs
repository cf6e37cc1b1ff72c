use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Cursor, Tensor};

use super::config::ModelConfig;

/// Conditioning units that are dropped or presented together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    /// Video features together with sync features.
    Video,
    Caption,
    Cot,
    Roi,
    /// Audio context together with its mask.
    Context,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Video,
        Modality::Caption,
        Modality::Cot,
        Modality::Roi,
        Modality::Context,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Video => "video",
            Modality::Caption => "caption",
            Modality::Cot => "cot",
            Modality::Roi => "roi",
            Modality::Context => "context",
        }
    }
}

/// All conditioning signals for one clip. `None` marks an absent field; the
/// model substitutes its learned null embedding for it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConditionBundle {
    /// [Lv × video_dim]
    pub video_feats: Option<Tensor>,
    /// [caption_dim]
    pub caption_emb: Option<Tensor>,
    /// [Lt × text_dim]
    pub cot_tokens: Option<Tensor>,
    /// [Lv × sync_dim]
    pub sync_feats: Option<Tensor>,
    /// [Lv × video_dim], or a single frame broadcast over the video stream
    pub roi_feats: Option<Tensor>,
    /// [latent_len × latent_dim]
    pub audio_context: Option<Tensor>,
    /// true = frame is given context
    pub context_mask: Option<Vec<bool>>,
}

const BIT_VIDEO: u8 = 1;
const BIT_CAPTION: u8 = 2;
const BIT_COT: u8 = 4;
const BIT_SYNC: u8 = 8;
const BIT_ROI: u8 = 16;
const BIT_CONTEXT: u8 = 32;

impl ConditionBundle {
    /// Fully unconditional bundle.
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn has(&self, m: Modality) -> bool {
        match m {
            Modality::Video => self.video_feats.is_some() || self.sync_feats.is_some(),
            Modality::Caption => self.caption_emb.is_some(),
            Modality::Cot => self.cot_tokens.is_some(),
            Modality::Roi => self.roi_feats.is_some(),
            Modality::Context => self.audio_context.is_some(),
        }
    }

    /// Copy with one unit marked absent.
    pub fn without(&self, m: Modality) -> Self {
        let mut b = self.clone();
        match m {
            Modality::Video => {
                b.video_feats = None;
                b.sync_feats = None;
            }
            Modality::Caption => b.caption_emb = None,
            Modality::Cot => b.cot_tokens = None,
            Modality::Roi => b.roi_feats = None,
            Modality::Context => {
                b.audio_context = None;
                b.context_mask = None;
            }
        }
        b
    }

    /// Copy presenting only unit `m`.
    pub fn only(&self, m: Modality) -> Self {
        Modality::ALL
            .iter()
            .filter(|&&o| o != m)
            .fold(self.clone(), |b, &o| b.without(o))
    }

    pub fn with_context(mut self, context: Tensor, mask: Vec<bool>) -> Self {
        self.audio_context = Some(context);
        self.context_mask = Some(mask);
        self
    }

    /// Checks field shapes against the model config.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let rows = |t: &Tensor, width: usize, what: &str| -> Result<usize> {
            match *t.shape() {
                [r, c] if c == width => Ok(r),
                _ => Err(Error::contract(format!(
                    "{what} must be [L × {width}], got {:?}",
                    t.shape()
                ))),
            }
        };
        let lv = match &self.video_feats {
            Some(v) => Some(rows(v, cfg.video_dim, "video_feats")?),
            None => None,
        };
        if let Some(s) = &self.sync_feats {
            let ls = rows(s, cfg.sync_dim, "sync_feats")?;
            if let Some(lv) = lv {
                if ls != lv {
                    return Err(Error::contract(format!("sync_feats has {ls} frames, video has {lv}")));
                }
            }
        }
        if let Some(c) = &self.caption_emb {
            if c.shape() != [cfg.caption_dim] {
                return Err(Error::shape("caption_emb", c.shape(), &[cfg.caption_dim]));
            }
        }
        if let Some(t) = &self.cot_tokens {
            rows(t, cfg.text_dim, "cot_tokens")?;
        }
        if let Some(r) = &self.roi_feats {
            let lr = rows(r, cfg.video_dim, "roi_feats")?;
            if let Some(lv) = lv {
                if lr != lv && lr != 1 && lv != 1 {
                    return Err(Error::contract(format!("roi_feats has {lr} frames, video has {lv}")));
                }
            }
        }
        match (&self.audio_context, &self.context_mask) {
            (None, None) => {}
            (Some(c), Some(m)) => {
                if c.shape() != [cfg.latent_len, cfg.latent_dim] {
                    return Err(Error::shape(
                        "audio_context",
                        c.shape(),
                        &[cfg.latent_len, cfg.latent_dim],
                    ));
                }
                if m.len() != cfg.latent_len {
                    return Err(Error::contract(format!(
                        "context_mask has {} entries, expected {}",
                        m.len(),
                        cfg.latent_len
                    )));
                }
            }
            _ => {
                return Err(Error::contract(
                    "audio_context and context_mask must be present together",
                ))
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut flags = 0u8;
        let fields = [
            (BIT_VIDEO, &self.video_feats),
            (BIT_CAPTION, &self.caption_emb),
            (BIT_COT, &self.cot_tokens),
            (BIT_SYNC, &self.sync_feats),
            (BIT_ROI, &self.roi_feats),
        ];
        for (bit, f) in &fields {
            if f.is_some() {
                flags |= bit;
            }
        }
        if self.audio_context.is_some() && self.context_mask.is_some() {
            flags |= BIT_CONTEXT;
        }
        let mut out = vec![flags];
        for (_, f) in &fields {
            if let Some(t) = f {
                out.extend(t.to_bytes());
            }
        }
        if let (Some(c), Some(m)) = (&self.audio_context, &self.context_mask) {
            out.extend(c.to_bytes());
            let mask = Tensor::vector(m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect());
            out.extend(mask.to_bytes());
        }
        out
    }

    pub(crate) fn read(cur: &mut Cursor<'_>) -> Result<Self> {
        let at = cur.offset();
        let flags = cur.u8("bundle flags")?;
        if flags & !0x3f != 0 {
            return Err(Error::format(at, format!("unknown bundle flags {flags:#x}")));
        }
        let mut take = |bit: u8| -> Result<Option<Tensor>> {
            if flags & bit != 0 {
                cur.tensor().map(Some)
            } else {
                Ok(None)
            }
        };
        let video_feats = take(BIT_VIDEO)?;
        let caption_emb = take(BIT_CAPTION)?;
        let cot_tokens = take(BIT_COT)?;
        let sync_feats = take(BIT_SYNC)?;
        let roi_feats = take(BIT_ROI)?;
        let (audio_context, context_mask) = if flags & BIT_CONTEXT != 0 {
            let c = cur.tensor()?;
            let m = cur.tensor()?;
            (Some(c), Some(m.data().iter().map(|&v| v != 0.0).collect()))
        } else {
            (None, None)
        };
        Ok(Self {
            video_feats,
            caption_emb,
            cot_tokens,
            sync_feats,
            roi_feats,
            audio_context,
            context_mask,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let b = Self::read(&mut cur)?;
        if cur.remaining() != 0 {
            return Err(Error::format(cur.offset(), "trailing bytes after bundle"));
        }
        Ok(b)
    }

    /// SHA-256 over the serialized conditions, hex encoded.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn full(cfg: &ModelConfig, rng: &mut Rng) -> ConditionBundle {
        ConditionBundle {
            video_feats: Some(Tensor::randn(&[4, cfg.video_dim], rng)),
            caption_emb: Some(Tensor::randn(&[cfg.caption_dim], rng)),
            cot_tokens: Some(Tensor::randn(&[2, cfg.text_dim], rng)),
            sync_feats: Some(Tensor::randn(&[4, cfg.sync_dim], rng)),
            roi_feats: Some(Tensor::randn(&[4, cfg.video_dim], rng)),
            audio_context: Some(Tensor::randn(&[cfg.latent_len, cfg.latent_dim], rng)),
            context_mask: Some(vec![true, true, false, false, true, true, true, false]),
        }
    }

    #[test]
    fn serialization_round_trips() {
        let cfg = ModelConfig::toy();
        let b = full(&cfg, &mut Rng::new(1));
        b.validate(&cfg).unwrap();
        assert_eq!(ConditionBundle::from_bytes(&b.to_bytes()).unwrap(), b);
        let partial = b.without(Modality::Video).without(Modality::Context);
        assert_eq!(ConditionBundle::from_bytes(&partial.to_bytes()).unwrap(), partial);
    }

    #[test]
    fn only_keeps_one_unit() {
        let cfg = ModelConfig::toy();
        let b = full(&cfg, &mut Rng::new(2)).only(Modality::Video);
        assert!(b.video_feats.is_some() && b.sync_feats.is_some());
        assert!(b.caption_emb.is_none() && b.cot_tokens.is_none() && b.roi_feats.is_none());
        assert!(b.audio_context.is_none() && b.context_mask.is_none());
    }

    #[test]
    fn context_without_mask_is_invalid() {
        let cfg = ModelConfig::toy();
        let mut b = ConditionBundle::empty();
        b.audio_context = Some(Tensor::zeros(&[cfg.latent_len, cfg.latent_dim]));
        assert!(b.validate(&cfg).is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let cfg = ModelConfig::toy();
        let b = full(&cfg, &mut Rng::new(3));
        assert_eq!(b.fingerprint(), b.clone().fingerprint());
        assert_ne!(b.fingerprint(), b.without(Modality::Cot).fingerprint());
        assert_eq!(b.fingerprint().len(), 64);
    }
}
