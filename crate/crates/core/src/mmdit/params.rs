use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::config::ModelConfig;

/// Streams that own a separate parameter set inside each multi-stream block.
pub const STREAMS: [&str; 3] = ["audio", "video", "text"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// N(0, 1/fan_in)
    Fan,
    Zero,
    /// Learned null embeddings.
    Null,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn linear(specs: &mut Vec<Spec>, prefix: &str, fan_in: usize, fan_out: usize, bias: bool, init: Init) {
    specs.push(Spec {
        name: format!("{prefix}.w"),
        shape: vec![fan_in, fan_out],
        init,
    });
    if bias {
        specs.push(Spec {
            name: format!("{prefix}.b"),
            shape: vec![fan_out],
            init: Init::Zero,
        });
    }
}

fn block(specs: &mut Vec<Spec>, prefix: &str, h: usize, m: usize) {
    linear(specs, &format!("{prefix}.ada"), h, 6 * h, true, Init::Zero);
    linear(specs, &format!("{prefix}.qkv"), h, 3 * h, true, Init::Fan);
    linear(specs, &format!("{prefix}.out"), h, h, true, Init::Fan);
    linear(specs, &format!("{prefix}.mlp1"), h, m, true, Init::Fan);
    linear(specs, &format!("{prefix}.mlp2"), m, h, true, Init::Fan);
}

fn specs(cfg: &ModelConfig) -> Vec<Spec> {
    let h = cfg.hidden_size;
    let m = cfg.mlp_hidden();
    let d = cfg.latent_dim;
    let mut s = Vec::new();
    let null = |name: &str, shape: Vec<usize>| Spec {
        name: format!("null.{name}"),
        shape,
        init: Init::Null,
    };
    s.push(null("video", vec![1, cfg.video_dim]));
    s.push(null("sync", vec![1, cfg.sync_dim]));
    s.push(null("caption", vec![cfg.caption_dim]));
    s.push(null("cot", vec![1, cfg.text_dim]));
    s.push(null("roi", vec![1, cfg.video_dim]));
    s.push(null("context", vec![h]));

    linear(&mut s, "time.fc1", cfg.freq_dim, h, true, Init::Fan);
    linear(&mut s, "time.fc2", h, h, true, Init::Fan);
    linear(&mut s, "cond.caption", cfg.caption_dim, h, true, Init::Fan);
    linear(&mut s, "cond.video", cfg.video_dim, h, true, Init::Fan);
    linear(&mut s, "cond.sync", cfg.sync_dim, h, true, Init::Fan);

    linear(&mut s, "audio_in", d, h, true, Init::Fan);
    linear(&mut s, "context_in", d + 1, h, false, Init::Fan);
    linear(&mut s, "video_in", cfg.video_dim, h, true, Init::Fan);
    linear(&mut s, "roi_in", cfg.video_dim, h, true, Init::Fan);
    linear(&mut s, "text_in", cfg.text_dim, h, true, Init::Fan);

    for i in 0..cfg.multistream_layers {
        for stream in STREAMS {
            block(&mut s, &format!("ms.{i}.{stream}"), h, m);
        }
    }
    linear(&mut s, "fuse.gate", 2 * h, h, true, Init::Fan);
    linear(&mut s, "fuse.value", h, h, false, Init::Zero);
    for i in 0..cfg.singlestream_layers {
        block(&mut s, &format!("ss.{i}"), h, m);
    }
    linear(&mut s, "final.ada", h, 2 * h, true, Init::Zero);
    linear(&mut s, "final.out", h, d, true, Init::Zero);
    s
}

/// Names and shapes of every learnable tensor, sorted by name.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut v: Vec<_> = specs(cfg).into_iter().map(|s| (s.name, s.shape)).collect();
    v.sort();
    v
}

/// Exact number of scalars in the parameter set generated for `cfg`.
pub fn count_params(cfg: &ModelConfig) -> usize {
    specs(cfg).iter().map(|s| s.shape.iter().product::<usize>()).sum()
}

/// Named parameter tensors. Iteration order is the sorted name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// adaLN-Zero style initialization: modulation maps, the fusion value map
    /// and the output projection start at zero; other weights are N(0, 1/fan_in).
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = BTreeMap::new();
        for spec in specs(cfg) {
            let t = match spec.init {
                Init::Zero => Tensor::zeros(&spec.shape),
                Init::Fan => {
                    let std = 1.0 / (spec.shape[0] as f32).sqrt();
                    Tensor::randn(&spec.shape, rng).scale(std)
                }
                Init::Null => Tensor::randn(&spec.shape, rng).scale(0.1),
            };
            tensors.insert(spec.name, t);
        }
        Ok(Self { tensors })
    }

    /// Every tensor N(0, 1/fan_in), nulls included; no zero-initialised maps.
    /// Used by derivative probes and tests that need every path active.
    pub fn init_dense(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = BTreeMap::new();
        for spec in specs(cfg) {
            let std = 1.0 / (spec.shape[0] as f32).sqrt();
            tensors.insert(spec.name, Tensor::randn(&spec.shape, rng).scale(std));
        }
        Ok(Self { tensors })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    /// Checks names and shapes against the set generated for `cfg`.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let want = param_shapes(cfg);
        if want.len() != self.tensors.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, found {}",
                want.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in want {
            match self.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => return Err(Error::shape("parameter", &shape, t.shape())),
                None => return Err(Error::contract(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// f64 copies shared across graphs.
    pub fn prepare(&self) -> PreparedParams {
        PreparedParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), (t.shape().to_vec(), Arc::new(t.to_f64()))))
                .collect(),
        }
    }

    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }
}

/// Parameters converted once to the graph's f64 representation.
#[derive(Debug, Clone)]
pub struct PreparedParams {
    pub(crate) tensors: BTreeMap<String, (Vec<usize>, Arc<Vec<f64>>)>,
}

impl PreparedParams {
    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.tensors.get(name).map(|(s, _)| s.as_slice())
    }

    pub fn data(&self, name: &str) -> Option<&[f64]> {
        self.tensors.get(name).map(|(_, d)| d.as_slice())
    }

    /// Replace one tensor's values (used by finite-difference probes).
    pub fn set(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        if slot.1.len() != data.len() {
            return Err(Error::contract(format!("{name}: wrong length {}", data.len())));
        }
        slot.1 = Arc::new(data);
        Ok(())
    }
}
