use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the video stream is stretched to the audio frame rate before fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    #[default]
    Linear,
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub heads: usize,
    pub multistream_layers: usize,
    pub singlestream_layers: usize,
    /// Width of one latent frame.
    pub latent_dim: usize,
    /// Latent frames per clip.
    pub latent_len: usize,
    pub video_dim: usize,
    pub text_dim: usize,
    pub caption_dim: usize,
    pub sync_dim: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    /// Number of sinusoidal timestep features (even).
    #[serde(default = "default_freq_dim")]
    pub freq_dim: usize,
    #[serde(default)]
    pub upsample: Upsample,
}

fn default_mlp_ratio() -> f64 {
    4.0
}

fn default_freq_dim() -> usize {
    32
}

impl ModelConfig {
    fn scaled(hidden_size: usize, heads: usize, ms: usize, ss: usize) -> Self {
        Self {
            hidden_size,
            heads,
            multistream_layers: ms,
            singlestream_layers: ss,
            latent_dim: 64,
            latent_len: 194,
            video_dim: 1024,
            text_dim: 2048,
            caption_dim: 1024,
            sync_dim: 768,
            mlp_ratio: 4.0,
            freq_dim: 256,
            upsample: Upsample::Linear,
        }
    }

    /// 1024 hidden, 16 heads, 14 multi-stream + 7 single-stream layers.
    pub fn large() -> Self {
        Self::scaled(1024, 16, 14, 7)
    }

    /// 768 hidden, 12 heads, 14 + 7 layers.
    pub fn medium() -> Self {
        Self::scaled(768, 12, 14, 7)
    }

    /// 512 hidden, 8 heads, 12 + 6 layers.
    pub fn small() -> Self {
        Self::scaled(512, 8, 12, 6)
    }

    /// Test-sized model: 64 hidden, 4 heads, 2 + 1 layers, 8×4 latents.
    pub fn toy() -> Self {
        Self {
            hidden_size: 64,
            heads: 4,
            multistream_layers: 2,
            singlestream_layers: 1,
            latent_dim: 4,
            latent_len: 8,
            video_dim: 8,
            text_dim: 8,
            caption_dim: 8,
            sync_dim: 4,
            mlp_ratio: 4.0,
            freq_dim: 32,
            upsample: Upsample::Linear,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "large" => Some(Self::large()),
            "medium" => Some(Self::medium()),
            "small" => Some(Self::small()),
            "toy" => Some(Self::toy()),
            _ => None,
        }
    }

    pub fn depth(&self) -> usize {
        self.multistream_layers + self.singlestream_layers
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.hidden_size as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("heads", self.heads),
            ("multistream_layers", self.multistream_layers),
            ("singlestream_layers", self.singlestream_layers),
            ("latent_dim", self.latent_dim),
            ("latent_len", self.latent_len),
            ("video_dim", self.video_dim),
            ("text_dim", self.text_dim),
            ("caption_dim", self.caption_dim),
            ("sync_dim", self.sync_dim),
            ("freq_dim", self.freq_dim),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{key}"), "must be positive"));
            }
        }
        if self.hidden_size % self.heads != 0 {
            return Err(Error::config(
                "model.heads",
                format!(
                    "hidden_size {} is not divisible by {} heads",
                    self.hidden_size, self.heads
                ),
            ));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::config(
                "model.heads",
                format!("head width {} must be even for rotary positions", self.head_dim()),
            ));
        }
        if self.freq_dim % 2 != 0 {
            return Err(Error::config("model.freq_dim", "must be even"));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::config("model.mlp_ratio", "must give a positive MLP width"));
        }
        Ok(())
    }
}
