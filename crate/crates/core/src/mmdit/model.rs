//! Velocity network: multi-stream blocks with per-stream parameters and one
//! joint attention, gated video→audio fusion, single-stream blocks, and AdaLN
//! modulation from a global condition vector.

use std::collections::HashMap;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::DEFAULT_LN_EPS;
use crate::tensor::Tensor;

use super::bundle::ConditionBundle;
use super::config::{ModelConfig, Upsample};
use super::params::{ModelParams, PreparedParams};

/// Sinusoid argument scale: t ∈ [0, 1] is stretched to [0, 1000].
pub const TIME_SCALE: f64 = 1000.0;

/// Parameter name → graph node for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Bind every parameter; `trainable` decides leaf vs constant.
    pub fn bind(g: &mut Graph, params: &PreparedParams, trainable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(name, (shape, data))| (name.clone(), g.shared(shape, data.clone(), trainable)))
            .collect();
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("unbound parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    fn linear(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let w = self.var(&format!("{prefix}.w"))?;
        let b = self.vars.get(&format!("{prefix}.b")).copied();
        g.linear(x, w, b)
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::domain(format!(
            "timestep feature width {dim} must be even and positive"
        )));
    }
    Ok(())
}

fn frequencies(dim: usize) -> impl Iterator<Item = f64> {
    let half = dim / 2;
    (0..half).map(move |i| libm::exp(-libm::log(10_000.0) * i as f64 / half as f64))
}

/// Sinusoidal timestep features `[sin(sω_i t)…, cos(sω_i t)…]` before the
/// learned projection.
pub fn timestep_features(t: f64, dim: usize) -> Result<Vec<f64>> {
    check_t(t)?;
    check_dim(dim)?;
    let args: Vec<f64> = frequencies(dim).map(|w| TIME_SCALE * w * t).collect();
    Ok(args
        .iter()
        .map(|&a| libm::sin(a))
        .chain(args.iter().map(|&a| libm::cos(a)))
        .collect())
}

/// Analytic d/dt of [`timestep_features`].
pub fn timestep_features_dt(t: f64, dim: usize) -> Result<Vec<f64>> {
    check_t(t)?;
    check_dim(dim)?;
    let ws: Vec<f64> = frequencies(dim).map(|w| TIME_SCALE * w).collect();
    Ok(ws
        .iter()
        .map(|&w| w * libm::cos(w * t))
        .chain(ws.iter().map(|&w| -w * libm::sin(w * t)))
        .collect())
}

/// Learned two-layer map of the timestep features to `hidden_size`.
pub fn timestep_embed(g: &mut Graph, p: &Bound, cfg: &ModelConfig, t: f64) -> Result<Var> {
    let feats = timestep_features(t, cfg.freq_dim)?;
    let x = g.constant_f64(&[1, cfg.freq_dim], feats);
    let h = p.linear(g, "time.fc1", x)?;
    let h = g.silu(h);
    let h = p.linear(g, "time.fc2", h)?;
    g.reshape(h, &[cfg.hidden_size])
}

fn input_or_null(g: &mut Graph, p: &Bound, t: Option<&Tensor>, null: &str) -> Result<Var> {
    match t {
        Some(t) => Ok(g.constant(t)),
        None => p.var(null),
    }
}

/// c_g = proj(caption) + proj(mean_t video) + proj(mean_t sync) + t_emb.
pub fn global_condition(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    bundle: &ConditionBundle,
    t_emb: Var,
) -> Result<Var> {
    let h = cfg.hidden_size;
    let caption = input_or_null(g, p, bundle.caption_emb.as_ref(), "null.caption")?;
    let caption = g.reshape(caption, &[1, cfg.caption_dim])?;
    let caption = p.linear(g, "cond.caption", caption)?;

    let video = input_or_null(g, p, bundle.video_feats.as_ref(), "null.video")?;
    let video = g.mean_rows(video)?;
    let video = g.reshape(video, &[1, cfg.video_dim])?;
    let video = p.linear(g, "cond.video", video)?;

    let sync = input_or_null(g, p, bundle.sync_feats.as_ref(), "null.sync")?;
    let sync = g.mean_rows(sync)?;
    let sync = g.reshape(sync, &[1, cfg.sync_dim])?;
    let sync = p.linear(g, "cond.sync", sync)?;

    let s = g.add(caption, video)?;
    let s = g.add(s, sync)?;
    let s = g.reshape(s, &[h])?;
    g.add(s, t_emb)
}

/// The six AdaLN vectors (shift/scale/gate for attention, then MLP).
struct Modulation {
    shift_a: Var,
    scale_a: Var,
    gate_a: Var,
    shift_m: Var,
    scale_m: Var,
    gate_m: Var,
}

fn modulation(g: &mut Graph, p: &Bound, prefix: &str, c_act: Var, h: usize) -> Result<Modulation> {
    let m = p.linear(g, &format!("{prefix}.ada"), c_act)?;
    let mut parts = Vec::with_capacity(6);
    for i in 0..6 {
        let s = g.slice_cols(m, i * h, h)?;
        parts.push(g.reshape(s, &[h])?);
    }
    Ok(Modulation {
        shift_a: parts[0],
        scale_a: parts[1],
        gate_a: parts[2],
        shift_m: parts[3],
        scale_m: parts[4],
        gate_m: parts[5],
    })
}

fn silu_condition(g: &mut Graph, c_g: Var, h: usize) -> Result<Var> {
    let c = g.silu(c_g);
    g.reshape(c, &[1, h])
}

struct StreamQkv {
    q: Var,
    k: Var,
    v: Var,
    len: usize,
}

fn stream_qkv(g: &mut Graph, p: &Bound, prefix: &str, x: Var, m: &Modulation, h: usize) -> Result<StreamQkv> {
    let len = g.shape(x)[0];
    let n = g.modulated_layer_norm(x, m.scale_a, m.shift_a, DEFAULT_LN_EPS)?;
    let qkv = p.linear(g, &format!("{prefix}.qkv"), n)?;
    Ok(StreamQkv {
        q: g.slice_cols(qkv, 0, h)?,
        k: g.slice_cols(qkv, h, h)?,
        v: g.slice_cols(qkv, 2 * h, h)?,
        len,
    })
}

/// Attention over the concatenation of all streams, split back per stream.
/// Each stream's positions restart at zero.
fn joint_attention(g: &mut Graph, streams: &[StreamQkv], heads: usize) -> Result<Vec<Var>> {
    let positions: Vec<f64> = streams.iter().flat_map(|s| (0..s.len).map(|i| i as f64)).collect();
    let cat = |g: &mut Graph, f: fn(&StreamQkv) -> Var| -> Result<Var> {
        let parts: Vec<Var> = streams.iter().map(f).collect();
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat_rows(&parts)
        }
    };
    let q = cat(g, |s| s.q)?;
    let k = cat(g, |s| s.k)?;
    let v = cat(g, |s| s.v)?;
    let q = g.rope(q, heads, positions.clone())?;
    let k = g.rope(k, heads, positions)?;
    let q = g.split_heads(q, heads)?;
    let k = g.split_heads(k, heads)?;
    let v = g.split_heads(v, heads)?;
    let o = g.attention(q, k, v)?;
    let o = g.merge_heads(o)?;
    if streams.len() == 1 {
        return Ok(vec![o]);
    }
    let mut out = Vec::with_capacity(streams.len());
    let mut start = 0;
    for s in streams {
        out.push(g.slice_rows(o, start, s.len)?);
        start += s.len;
    }
    Ok(out)
}

/// Gated attention residual, then the gated MLP residual.
fn finish_stream(g: &mut Graph, p: &Bound, prefix: &str, x: Var, attn: Var, m: &Modulation) -> Result<Var> {
    let o = p.linear(g, &format!("{prefix}.out"), attn)?;
    let o = g.mul_row(o, m.gate_a)?;
    let x = g.add(x, o)?;
    let n = g.modulated_layer_norm(x, m.scale_m, m.shift_m, DEFAULT_LN_EPS)?;
    let hdn = p.linear(g, &format!("{prefix}.mlp1"), n)?;
    let hdn = g.gelu(hdn);
    let hdn = p.linear(g, &format!("{prefix}.mlp2"), hdn)?;
    let hdn = g.mul_row(hdn, m.gate_m)?;
    g.add(x, hdn)
}

/// Output of one multi-stream block.
#[derive(Debug, Clone, Copy)]
pub struct Streams {
    pub audio: Var,
    pub video: Option<Var>,
    pub text: Option<Var>,
}

/// One multi-stream block. `layer` selects the `ms.{layer}.*` parameters.
/// Absent (length-0) video or text streams are passed as `None`.
pub fn multi_stream_block(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    layer: usize,
    streams: Streams,
    c_g: Var,
) -> Result<Streams> {
    let h = cfg.hidden_size;
    if g.shape(streams.audio).first().copied().unwrap_or(0) == 0 {
        return Err(Error::contract("multi-stream block needs a non-empty audio stream"));
    }
    let c_act = silu_condition(g, c_g, h)?;
    let present: Vec<(&str, Var)> = [
        ("audio", Some(streams.audio)),
        ("video", streams.video),
        ("text", streams.text),
    ]
    .into_iter()
    .filter_map(|(n, v)| v.map(|v| (n, v)))
    .collect();
    let mut mods = Vec::with_capacity(present.len());
    let mut qkvs = Vec::with_capacity(present.len());
    for &(name, x) in &present {
        let prefix = format!("ms.{layer}.{name}");
        if g.shape(x).len() != 2 || g.shape(x)[1] != h {
            return Err(Error::shape("multi_stream_block", g.shape(x), &[0, h]));
        }
        let m = modulation(g, p, &prefix, c_act, h)?;
        qkvs.push(stream_qkv(g, p, &prefix, x, &m, h)?);
        mods.push(m);
    }
    let attn = joint_attention(g, &qkvs, cfg.heads)?;
    let mut out = Streams {
        audio: streams.audio,
        video: None,
        text: None,
    };
    for (((name, x), m), a) in present.iter().zip(&mods).zip(attn) {
        let y = finish_stream(g, p, &format!("ms.{layer}.{name}"), *x, a, m)?;
        match *name {
            "audio" => out.audio = y,
            "video" => out.video = Some(y),
            _ => out.text = Some(y),
        }
    }
    Ok(out)
}

/// Interpolation matrix [la × lv] mapping video frames onto audio frames,
/// with audio index la-1 landing on video index lv-1.
pub fn upsample_matrix(la: usize, lv: usize, mode: Upsample) -> Result<Vec<f64>> {
    if lv == 0 || lv > la {
        return Err(Error::contract(format!(
            "cannot upsample {lv} video frames onto {la} audio frames"
        )));
    }
    let mut u = vec![0.0; la * lv];
    for j in 0..la {
        let pos = if la == 1 {
            0.0
        } else {
            j as f64 * (lv - 1) as f64 / (la - 1) as f64
        };
        match mode {
            Upsample::Linear => {
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(lv - 1);
                let w = pos - lo as f64;
                u[j * lv + lo] += 1.0 - w;
                u[j * lv + hi] += w;
            }
            Upsample::Nearest => {
                let i = (pos + 0.5).floor() as usize;
                u[j * lv + i.min(lv - 1)] = 1.0;
            }
        }
    }
    Ok(u)
}

/// out_i = audio_i + sigmoid(W_g [audio_i ; up_i] + b_g) ⊙ (W_v up_i), where
/// `up` is the video stream resampled to the audio length.
pub fn gated_fuse(g: &mut Graph, p: &Bound, cfg: &ModelConfig, audio: Var, video: Var) -> Result<Var> {
    let la = g.shape(audio)[0];
    let lv = g.shape(video)[0];
    let up = if la == lv {
        video
    } else {
        let u = g.constant_f64(&[la, lv], upsample_matrix(la, lv, cfg.upsample)?);
        g.matmul(u, video)?
    };
    let cat = g.concat_cols(&[audio, up])?;
    let gate = p.linear(g, "fuse.gate", cat)?;
    let gate = g.sigmoid(gate);
    let val = p.linear(g, "fuse.value", up)?;
    let gated = g.mul(gate, val)?;
    g.add(audio, gated)
}

/// AdaLN-modulated self-attention + MLP over the fused audio sequence.
pub fn single_stream_block(g: &mut Graph, p: &Bound, cfg: &ModelConfig, layer: usize, x: Var, c_g: Var) -> Result<Var> {
    let h = cfg.hidden_size;
    let prefix = format!("ss.{layer}");
    let c_act = silu_condition(g, c_g, h)?;
    let m = modulation(g, p, &prefix, c_act, h)?;
    let qkv = stream_qkv(g, p, &prefix, x, &m, h)?;
    let attn = joint_attention(g, &[qkv], cfg.heads)?;
    finish_stream(g, p, &prefix, x, attn[0], &m)
}

/// Channels appended to x_t when context is present: masked context, then
/// the mask indicator.
fn context_channels(ctx: &Tensor, mask: &[bool]) -> Result<Vec<f64>> {
    let (l, d) = ctx.dims2()?;
    let mut out = Vec::with_capacity(l * (d + 1));
    for (r, &keep) in mask.iter().enumerate() {
        if keep {
            out.extend(ctx.row(r).iter().map(|&v| v as f64));
            out.push(1.0);
        } else {
            out.extend(std::iter::repeat(0.0).take(d + 1));
        }
    }
    Ok(out)
}

fn audio_input(g: &mut Graph, p: &Bound, cfg: &ModelConfig, x_t: Var, bundle: &ConditionBundle) -> Result<Var> {
    let x = p.linear(g, "audio_in", x_t)?;
    match (&bundle.audio_context, &bundle.context_mask) {
        (Some(ctx), Some(mask)) => {
            let c = g.constant_f64(&[cfg.latent_len, cfg.latent_dim + 1], context_channels(ctx, mask)?);
            let c = p.linear(g, "context_in", c)?;
            g.add(x, c)
        }
        _ => {
            let null = p.var("null.context")?;
            g.add_row(x, null)
        }
    }
}

fn video_input(g: &mut Graph, p: &Bound, bundle: &ConditionBundle) -> Result<Var> {
    let video = input_or_null(g, p, bundle.video_feats.as_ref(), "null.video")?;
    let video = p.linear(g, "video_in", video)?;
    let roi = input_or_null(g, p, bundle.roi_feats.as_ref(), "null.roi")?;
    let roi = p.linear(g, "roi_in", roi)?;
    let (lv, lr, h) = (g.shape(video)[0], g.shape(roi)[0], g.shape(video)[1]);
    if lv == lr {
        g.add(video, roi)
    } else if lr == 1 {
        let r = g.reshape(roi, &[h])?;
        g.add_row(video, r)
    } else if lv == 1 {
        let v = g.reshape(video, &[h])?;
        g.add_row(roi, v)
    } else {
        Err(Error::contract(format!(
            "roi stream has {lr} frames, video stream has {lv}"
        )))
    }
}

/// Full velocity prediction inside an existing graph.
pub fn forward_graph(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    x_t: Var,
    t: f64,
    bundle: &ConditionBundle,
) -> Result<Var> {
    check_t(t)?;
    if g.shape(x_t) != [cfg.latent_len, cfg.latent_dim] {
        return Err(Error::shape("forward", g.shape(x_t), &[cfg.latent_len, cfg.latent_dim]));
    }
    bundle.validate(cfg)?;
    let h = cfg.hidden_size;
    let t_emb = timestep_embed(g, p, cfg, t)?;
    let c_g = global_condition(g, p, cfg, bundle, t_emb)?;

    let mut streams = Streams {
        audio: audio_input(g, p, cfg, x_t, bundle)?,
        video: Some(video_input(g, p, bundle)?),
        text: {
            let text = input_or_null(g, p, bundle.cot_tokens.as_ref(), "null.cot")?;
            Some(p.linear(g, "text_in", text)?)
        },
    };
    for layer in 0..cfg.multistream_layers {
        streams = multi_stream_block(g, p, cfg, layer, streams, c_g)?;
    }
    let video = streams.video.expect("video stream is always present in forward");
    let mut x = gated_fuse(g, p, cfg, streams.audio, video)?;
    for layer in 0..cfg.singlestream_layers {
        x = single_stream_block(g, p, cfg, layer, x, c_g)?;
    }

    let c_act = silu_condition(g, c_g, h)?;
    let m = p.linear(g, "final.ada", c_act)?;
    let shift = g.slice_cols(m, 0, h)?;
    let shift = g.reshape(shift, &[h])?;
    let scale = g.slice_cols(m, h, h)?;
    let scale = g.reshape(scale, &[h])?;
    let x = g.modulated_layer_norm(x, scale, shift, DEFAULT_LN_EPS)?;
    p.linear(g, "final.out", x)
}

/// Inference-only velocity prediction.
pub fn forward(
    params: &PreparedParams,
    cfg: &ModelConfig,
    x_t: &Tensor,
    t: f64,
    bundle: &ConditionBundle,
) -> Result<Tensor> {
    x_t.check_finite("x_t")?;
    let mut g = Graph::new();
    let p = Bound::bind(&mut g, params, false);
    let x = g.constant(x_t);
    let v = forward_graph(&mut g, &p, cfg, x, t, bundle)?;
    Ok(g.value(v))
}

/// A trained (or untrained) model ready for inference.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: PreparedParams,
}

impl Model {
    pub fn new(config: ModelConfig, params: &ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(Self {
            params: params.prepare(),
            config,
        })
    }

    pub fn forward(&self, x_t: &Tensor, t: f64, bundle: &ConditionBundle) -> Result<Tensor> {
        forward(&self.params, &self.config, x_t, t, bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels;
    use crate::mmdit::bundle::Modality;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn dense(cfg: &ModelConfig, seed: u64) -> ModelParams {
        ModelParams::init_dense(cfg, &mut Rng::new(seed)).unwrap()
    }

    fn full_bundle(cfg: &ModelConfig, lv: usize, rng: &mut Rng) -> ConditionBundle {
        ConditionBundle {
            video_feats: Some(Tensor::randn(&[lv, cfg.video_dim], rng)),
            caption_emb: Some(Tensor::randn(&[cfg.caption_dim], rng)),
            cot_tokens: Some(Tensor::randn(&[3, cfg.text_dim], rng)),
            sync_feats: Some(Tensor::randn(&[lv, cfg.sync_dim], rng)),
            roi_feats: Some(Tensor::randn(&[lv, cfg.video_dim], rng)),
            audio_context: None,
            context_mask: None,
        }
    }

    /// Plain-loop x·W + b over row-major f64.
    fn lin(x: &[f64], rows: usize, p: &ModelParams, prefix: &str) -> Vec<f64> {
        let w = p.get(&format!("{prefix}.w")).unwrap();
        let (fi, fo) = w.dims2().unwrap();
        let b = p.get(&format!("{prefix}.b")).ok();
        let mut out = vec![0.0; rows * fo];
        for r in 0..rows {
            for o in 0..fo {
                let mut acc = b.map_or(0.0, |b| b.data()[o] as f64);
                for i in 0..fi {
                    acc += x[r * fi + i] * w.data()[i * fo + o] as f64;
                }
                out[r * fo + o] = acc;
            }
        }
        out
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn features_at_zero_are_sin_zero_cos_one() {
        let f = timestep_features(0.0, 16).unwrap();
        assert!(f[..8].iter().all(|&v| v == 0.0));
        assert!(f[8..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn time_outside_unit_interval_is_domain_error() {
        for t in [-0.01, 1.01, f64::NAN] {
            assert!(matches!(timestep_features(t, 8), Err(Error::Domain(_))));
        }
        assert!(timestep_features(0.5, 7).is_err());
    }

    #[test]
    fn feature_derivative_matches_finite_differences() {
        let h = 1e-7;
        for &t in &[0.1, 0.37, 0.5, 0.9] {
            let ana = timestep_features_dt(t, 32).unwrap();
            let up = timestep_features(t + h, 32).unwrap();
            let dn = timestep_features(t - h, 32).unwrap();
            let fd: Vec<f64> = up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            let num: f64 = fd.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = ana.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(num / den < 1e-4, "t={t}: rel err {}", num / den);
        }
    }

    #[test]
    fn embedding_separates_times() {
        let cfg = ModelConfig::toy();
        let p = dense(&cfg, 1).prepare();
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, &p, false);
        let a = timestep_embed(&mut g, &b, &cfg, 0.1).unwrap();
        let c = timestep_embed(&mut g, &b, &cfg, 0.9).unwrap();
        assert!(g.value(a).distance(&g.value(c)).unwrap() > 0.0);
    }

    fn c_g_oracle(cfg: &ModelConfig, p: &ModelParams, bundle: &ConditionBundle, t_emb: &[f64]) -> Vec<f64> {
        let pick = |t: &Option<Tensor>, null: &str| t.clone().unwrap_or_else(|| p.get(null).unwrap().clone());
        let mean = |t: &Tensor| -> Vec<f64> {
            let (l, w) = t.dims2().unwrap();
            (0..w)
                .map(|c| (0..l).map(|r| t.row(r)[c] as f64).sum::<f64>() / l as f64)
                .collect()
        };
        let cap = pick(&bundle.caption_emb, "null.caption").to_f64();
        let vid = mean(&pick(&bundle.video_feats, "null.video"));
        let syn = mean(&pick(&bundle.sync_feats, "null.sync"));
        let terms = [
            lin(&cap, 1, p, "cond.caption"),
            lin(&vid, 1, p, "cond.video"),
            lin(&syn, 1, p, "cond.sync"),
        ];
        (0..cfg.hidden_size)
            .map(|i| terms.iter().map(|t| t[i]).sum::<f64>() + t_emb[i])
            .collect()
    }

    fn c_g_value(cfg: &ModelConfig, p: &ModelParams, bundle: &ConditionBundle, t: f64) -> (Vec<f64>, Vec<f64>) {
        let prepared = p.prepare();
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, &prepared, false);
        let te = timestep_embed(&mut g, &b, cfg, t).unwrap();
        let c = global_condition(&mut g, &b, cfg, bundle, te).unwrap();
        (g.value_f64(c).to_vec(), g.value_f64(te).to_vec())
    }

    #[test]
    fn global_condition_matches_hand_assembled_sum() {
        let cfg = ModelConfig::toy();
        let p = dense(&cfg, 2);
        let mut rng = Rng::new(3);
        for bundle in [full_bundle(&cfg, 4, &mut rng), ConditionBundle::empty()] {
            let (c, te) = c_g_value(&cfg, &p, &bundle, 0.3);
            assert!(max_abs_diff(&c, &c_g_oracle(&cfg, &p, &bundle, &te)) < 1e-6);
        }
    }

    #[test]
    fn constant_video_pools_to_one_frame() {
        let cfg = ModelConfig::toy();
        let p = dense(&cfg, 4);
        let mut rng = Rng::new(5);
        let frame = Tensor::randn(&[1, cfg.video_dim], &mut rng);
        let mut many = Vec::new();
        for _ in 0..6 {
            many.extend_from_slice(frame.data());
        }
        let one = ConditionBundle {
            video_feats: Some(frame.clone()),
            ..ConditionBundle::empty()
        };
        let six = ConditionBundle {
            video_feats: Some(Tensor::new(vec![6, cfg.video_dim], many).unwrap()),
            ..ConditionBundle::empty()
        };
        let (a, _) = c_g_value(&cfg, &p, &one, 0.5);
        let (b, _) = c_g_value(&cfg, &p, &six, 0.5);
        assert!(max_abs_diff(&a, &b) < 1e-9);
    }

    fn rand_var(g: &mut Graph, shape: &[usize], rng: &mut Rng) -> Var {
        g.constant(&Tensor::randn(shape, rng))
    }

    #[test]
    fn zero_gates_make_blocks_identities() {
        let cfg = ModelConfig::toy();
        let p = ModelParams::init(&cfg, &mut Rng::new(6)).unwrap().prepare();
        let h = cfg.hidden_size;
        let mut rng = Rng::new(7);
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, &p, false);
        let (a, v, t) = (
            rand_var(&mut g, &[5, h], &mut rng),
            rand_var(&mut g, &[3, h], &mut rng),
            rand_var(&mut g, &[2, h], &mut rng),
        );
        let c = rand_var(&mut g, &[h], &mut rng);
        let s = Streams {
            audio: a,
            video: Some(v),
            text: Some(t),
        };
        let out = multi_stream_block(&mut g, &b, &cfg, 0, s, c).unwrap();
        assert!(g.value(out.audio).bit_eq(&g.value(a)));
        assert!(g.value(out.video.unwrap()).bit_eq(&g.value(v)));
        assert!(g.value(out.text.unwrap()).bit_eq(&g.value(t)));
        let y = single_stream_block(&mut g, &b, &cfg, 0, a, c).unwrap();
        assert!(g.value(y).bit_eq(&g.value(a)));
    }

    #[test]
    fn absent_streams_reduce_to_audio_self_attention() {
        let cfg = ModelConfig::toy();
        let p = dense(&cfg, 8).prepare();
        let h = cfg.hidden_size;
        let mut rng = Rng::new(9);
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, &p, false);
        let a = rand_var(&mut g, &[5, h], &mut rng);
        let v = rand_var(&mut g, &[3, h], &mut rng);
        let c = rand_var(&mut g, &[h], &mut rng);
        let alone = multi_stream_block(
            &mut g,
            &b,
            &cfg,
            0,
            Streams {
                audio: a,
                video: None,
                text: None,
            },
            c,
        )
        .unwrap();
        assert_eq!(g.shape(alone.audio), &[5, h]);
        assert!(alone.video.is_none() && alone.text.is_none());
        let joint = multi_stream_block(
            &mut g,
            &b,
            &cfg,
            0,
            Streams {
                audio: a,
                video: Some(v),
                text: None,
            },
            c,
        )
        .unwrap();
        assert!(g.value(alone.audio).distance(&g.value(joint.audio)).unwrap() > 1e-6);

        let empty = g.constant_f64(&[0, h], vec![]);
        let err = multi_stream_block(
            &mut g,
            &b,
            &cfg,
            0,
            Streams {
                audio: empty,
                video: Some(v),
                text: None,
            },
            c,
        );
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    fn rotate(x: &[f64], rows: usize, heads: usize, width: usize) -> Vec<f64> {
        let hd = width / heads;
        let mut out = x.to_vec();
        for r in 0..rows {
            for head in 0..heads {
                for i in 0..hd / 2 {
                    let ang = r as f64 * kernels::rope_freq(i, hd);
                    let j = r * width + head * hd + 2 * i;
                    out[j] = x[j] * ang.cos() - x[j + 1] * ang.sin();
                    out[j + 1] = x[j] * ang.sin() + x[j + 1] * ang.cos();
                }
            }
        }
        out
    }

    #[test]
    fn joint_attention_matches_dense_score_matrix() {
        let (heads, width) = (2, 8);
        let hd = width / heads;
        let lens = [4usize, 3, 2];
        let mut rng = Rng::new(10);
        let mut g = Graph::new();
        let mut streams = Vec::new();
        let mut raw = Vec::new();
        for &l in &lens {
            let (q, k, v) = (
                Tensor::randn(&[l, width], &mut rng).to_f64(),
                Tensor::randn(&[l, width], &mut rng).to_f64(),
                Tensor::randn(&[l, width], &mut rng).to_f64(),
            );
            streams.push(StreamQkv {
                q: g.constant_f64(&[l, width], q.clone()),
                k: g.constant_f64(&[l, width], k.clone()),
                v: g.constant_f64(&[l, width], v.clone()),
                len: l,
            });
            raw.push((rotate(&q, l, heads, width), rotate(&k, l, heads, width), v));
        }
        let got = joint_attention(&mut g, &streams, heads).unwrap();

        let total: usize = lens.iter().sum();
        let cat = |f: fn(&(Vec<f64>, Vec<f64>, Vec<f64>)) -> &Vec<f64>| {
            raw.iter().flat_map(|r| f(r).clone()).collect::<Vec<f64>>()
        };
        let (q, k, v) = (cat(|r| &r.0), cat(|r| &r.1), cat(|r| &r.2));
        let mut want = vec![0.0; total * width];
        for head in 0..heads {
            let mut scores = vec![vec![0.0; total]; total];
            for a in 0..total {
                for b in 0..total {
                    scores[a][b] = (0..hd)
                        .map(|d| q[a * width + head * hd + d] * k[b * width + head * hd + d])
                        .sum::<f64>()
                        / (hd as f64).sqrt();
                }
                let m = scores[a].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores[a].iter().map(|s| (s - m).exp()).sum();
                for b in 0..total {
                    let p = (scores[a][b] - m).exp() / z;
                    for d in 0..hd {
                        want[a * width + head * hd + d] += p * v[b * width + head * hd + d];
                    }
                }
            }
        }
        let mut start = 0;
        for (o, &l) in got.iter().zip(&lens) {
            assert!(max_abs_diff(g.value_f64(*o), &want[start * width..(start + l) * width]) < 1e-5);
            start += l;
        }
    }

    #[test]
    fn closed_gate_passes_audio_through() {
        let cfg = ModelConfig::toy();
        let mut params = dense(&cfg, 11);
        params.insert("fuse.gate.b", Tensor::full(&[cfg.hidden_size], -1e4));
        let p = params.prepare();
        let mut rng = Rng::new(12);
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, &p, false);
        let a = rand_var(&mut g, &[6, cfg.hidden_size], &mut rng);
        let v = rand_var(&mut g, &[3, cfg.hidden_size], &mut rng);
        let out = gated_fuse(&mut g, &b, &cfg, a, v).unwrap();
        assert!(max_abs_diff(g.value_f64(out), g.value_f64(a)) < 1e-6);
        assert!(matches!(gated_fuse(&mut g, &b, &cfg, v, a), Err(Error::Contract(_))));
    }

    #[test]
    fn equal_lengths_upsample_to_identity() {
        for mode in [Upsample::Linear, Upsample::Nearest] {
            let u = upsample_matrix(5, 5, mode).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    assert_eq!(u[i * 5 + j], if i == j { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn upsampling_three_to_six_matches_scalar_lerp() {
        let video = [2.0, -1.0, 5.0];
        let u = upsample_matrix(6, 3, Upsample::Linear).unwrap();
        for j in 0..6 {
            let pos = j as f64 * 2.0 / 5.0;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(2);
            let frac = pos - lo as f64;
            let want = video[lo] + frac * (video[hi] - video[lo]);
            let got: f64 = (0..3).map(|i| u[j * 3 + i] * video[i]).sum();
            assert!((got - want).abs() < 1e-12, "j={j}: {got} vs {want}");
        }
        let near = upsample_matrix(6, 3, Upsample::Nearest).unwrap();
        assert!(near.chunks(3).all(|r| r.iter().filter(|&&w| w == 1.0).count() == 1));
    }

    #[test]
    fn single_block_condition_gradient_matches_finite_differences() {
        let cfg = ModelConfig::toy();
        let p = dense(&cfg, 13).prepare();
        let h = cfg.hidden_size;
        let mut rng = Rng::new(14);
        let x = Tensor::randn(&[5, h], &mut rng);
        let c0 = Tensor::randn(&[h], &mut rng).to_f64();
        let probe = Tensor::randn(&[5, h], &mut rng);
        let run = |c: Vec<f64>, grad: bool| -> (f64, Option<Vec<f64>>) {
            let mut g = Graph::new();
            let b = Bound::bind(&mut g, &p, false);
            let xv = g.constant(&x);
            let cv = if grad {
                g.leaf_f64(&[h], c).unwrap()
            } else {
                g.constant_f64(&[h], c)
            };
            let y = single_stream_block(&mut g, &b, &cfg, 0, xv, cv).unwrap();
            let r = g.constant(&probe);
            let prod = g.mul(y, r).unwrap();
            let loss = g.sum(prod);
            let val = g.value_f64(loss)[0];
            let grads = grad.then(|| g.backward(loss).unwrap().get_f64(cv).unwrap().to_vec());
            (val, grads)
        };
        let ana = run(c0.clone(), true).1.unwrap();
        let eps = 1e-5;
        let fd: Vec<f64> = (0..h)
            .map(|i| {
                let (mut up, mut dn) = (c0.clone(), c0.clone());
                up[i] += eps;
                dn[i] -= eps;
                (run(up, false).0 - run(dn, false).0) / (2.0 * eps)
            })
            .collect();
        let num: f64 = fd.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = ana.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(num / den < 1e-4, "rel err {}", num / den);
    }

    #[test]
    fn fresh_model_predicts_zero_velocity() {
        let cfg = ModelConfig::toy();
        let model = Model::new(cfg.clone(), &ModelParams::init(&cfg, &mut Rng::new(15)).unwrap()).unwrap();
        let mut rng = Rng::new(16);
        let x = Tensor::randn(&[cfg.latent_len, cfg.latent_dim], &mut rng);
        let v = model.forward(&x, 0.4, &full_bundle(&cfg, 4, &mut rng)).unwrap();
        assert_eq!(v.shape(), x.shape());
        assert!(v.data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn zero_gates_leave_only_input_and_output_projections() {
        let cfg = ModelConfig::toy();
        let mut rng = Rng::new(17);
        let mut params = ModelParams::init(&cfg, &mut rng).unwrap();
        params.insert(
            "final.out.w",
            Tensor::randn(&[cfg.hidden_size, cfg.latent_dim], &mut rng),
        );
        params.insert("final.out.b", Tensor::randn(&[cfg.latent_dim], &mut rng));
        let x = Tensor::randn(&[cfg.latent_len, cfg.latent_dim], &mut rng);
        let got = forward(&params.prepare(), &cfg, &x, 0.7, &full_bundle(&cfg, 4, &mut rng)).unwrap();

        let (l, h) = (cfg.latent_len, cfg.hidden_size);
        let mut a = lin(&x.to_f64(), l, &params, "audio_in");
        let null = params.get("null.context").unwrap().to_f64();
        for r in 0..l {
            for c in 0..h {
                a[r * h + c] += null[c];
            }
            let row = &mut a[r * h..(r + 1) * h];
            let mu = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / h as f64;
            row.iter_mut()
                .for_each(|v| *v = (*v - mu) / (var + DEFAULT_LN_EPS).sqrt());
        }
        let want = lin(&a, l, &params, "final.out");
        assert!(max_abs_diff(&got.to_f64(), &want) < 1e-5);
    }

    #[test]
    fn frame_permutation_changes_output() {
        let cfg = ModelConfig::toy();
        let p = dense(&cfg, 18).prepare();
        let mut rng = Rng::new(19);
        let x = Tensor::randn(&[cfg.latent_len, cfg.latent_dim], &mut rng);
        let bundle = full_bundle(&cfg, 4, &mut rng);
        let perm: Vec<usize> = (0..cfg.latent_len).rev().collect();
        let shuffle = |t: &Tensor| {
            let data: Vec<f32> = perm.iter().flat_map(|&r| t.row(r).to_vec()).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        };
        let v = forward(&p, &cfg, &x, 0.5, &bundle).unwrap();
        let vp = forward(&p, &cfg, &shuffle(&x), 0.5, &bundle).unwrap();
        assert!(shuffle(&v).distance(&vp).unwrap() > 1e-4);
    }

    #[test]
    fn absent_modality_equals_explicit_null() {
        let cfg = ModelConfig::toy();
        let params = dense(&cfg, 20);
        let p = params.prepare();
        let mut rng = Rng::new(21);
        let x = Tensor::randn(&[cfg.latent_len, cfg.latent_dim], &mut rng);
        let full = full_bundle(&cfg, 4, &mut rng);
        let null = |n: &str| Some(params.get(n).unwrap().clone());
        for m in [Modality::Video, Modality::Caption, Modality::Cot, Modality::Roi] {
            let absent = full.without(m);
            let mut explicit = absent.clone();
            match m {
                Modality::Video => {
                    explicit.video_feats = null("null.video");
                    explicit.sync_feats = null("null.sync");
                }
                Modality::Caption => explicit.caption_emb = null("null.caption"),
                Modality::Cot => explicit.cot_tokens = null("null.cot"),
                Modality::Roi => explicit.roi_feats = null("null.roi"),
                Modality::Context => unreachable!(),
            }
            let a = forward(&p, &cfg, &x, 0.25, &absent).unwrap();
            let b = forward(&p, &cfg, &x, 0.25, &explicit).unwrap();
            assert!(a.bit_eq(&b), "{}", m.name());
        }
    }

    #[test]
    fn conditions_reach_the_output() {
        let cfg = ModelConfig::toy();
        let p = dense(&cfg, 22).prepare();
        let mut rng = Rng::new(23);
        let x = Tensor::randn(&[cfg.latent_len, cfg.latent_dim], &mut rng);
        let full = full_bundle(&cfg, 4, &mut rng);
        let uncond = forward(&p, &cfg, &x, 0.5, &ConditionBundle::empty()).unwrap();
        let cond = forward(&p, &cfg, &x, 0.5, &full).unwrap();
        assert!(cond.distance(&uncond).unwrap() > 0.0);
        let mask = (0..cfg.latent_len).map(|i| i < 3).collect();
        let ctx = full
            .clone()
            .with_context(Tensor::randn(&[cfg.latent_len, cfg.latent_dim], &mut rng), mask);
        assert!(forward(&p, &cfg, &x, 0.5, &ctx).unwrap().distance(&cond).unwrap() > 0.0);
    }

    #[test]
    fn context_on_hidden_frames_is_ignored() {
        let cfg = ModelConfig::toy();
        let p = dense(&cfg, 24).prepare();
        let mut rng = Rng::new(25);
        let x = Tensor::randn(&[cfg.latent_len, cfg.latent_dim], &mut rng);
        let mask: Vec<bool> = (0..cfg.latent_len).map(|i| i % 2 == 0).collect();
        let c1 = Tensor::randn(&[cfg.latent_len, cfg.latent_dim], &mut rng);
        let mut c2 = c1.clone();
        for r in (1..cfg.latent_len).step_by(2) {
            c2.row_mut(r).iter_mut().for_each(|v| *v += 3.0);
        }
        let a = forward(
            &p,
            &cfg,
            &x,
            0.5,
            &ConditionBundle::empty().with_context(c1, mask.clone()),
        )
        .unwrap();
        let b = forward(&p, &cfg, &x, 0.5, &ConditionBundle::empty().with_context(c2, mask)).unwrap();
        assert!(a.bit_eq(&b));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn forward_is_total_over_random_configs(
            hidden in 2usize..=64, heads in 1usize..=8, ms in 1usize..=2, ss in 1usize..=2,
            latent_len in 2usize..=16, latent_dim in 2usize..=8, video_dim in 2usize..=16,
            text_dim in 2usize..=16, caption_dim in 2usize..=16, sync_dim in 2usize..=16,
            lv in 1usize..=20, seed in 0u64..1000,
        ) {
            let cfg = ModelConfig {
                hidden_size: hidden, heads, multistream_layers: ms, singlestream_layers: ss,
                latent_dim, latent_len, video_dim, text_dim, caption_dim, sync_dim,
                mlp_ratio: 2.0, freq_dim: 8, upsample: Upsample::Linear,
            };
            let mut rng = Rng::new(seed);
            match ModelParams::init_dense(&cfg, &mut rng) {
                Err(e) => prop_assert!(matches!(e, Error::Config { .. }), "{}", e),
                Ok(params) => {
                    let x = Tensor::randn(&[latent_len, latent_dim], &mut rng);
                    let bundle = full_bundle(&cfg, lv, &mut rng);
                    match forward(&params.prepare(), &cfg, &x, 0.5, &bundle) {
                        Ok(v) => prop_assert_eq!(v.shape(), x.shape()),
                        Err(e) => prop_assert!(matches!(e, Error::Contract(_) | Error::Shape { .. }), "{e}"),
                    }
                }
            }
        }
    }
}
