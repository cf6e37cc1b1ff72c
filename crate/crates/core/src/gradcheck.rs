//! Central finite-difference checks of every autodiff primitive and of the
//! full velocity network.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::mmdit::{forward_graph, Bound, ConditionBundle, ModelConfig, ModelParams, PreparedParams};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Denominator floor of the relative error.
pub const ERROR_FLOOR: f64 = 1e-6;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub kind: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub model: ModelConfig,
    /// Entries probed per model parameter tensor.
    pub probes: usize,
    /// Scales the analytic gradient of the named entry by 1.01 (fault
    /// injection for harness tests).
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::toy(),
            probes: 3,
            corrupt: None,
        }
    }
}

/// ‖a − n‖ / max(‖a‖, ‖n‖, floor)
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(ERROR_FLOOR)
}

type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    build: Build,
}

fn cases() -> Vec<Case> {
    fn c(name: &'static str, shapes: &[&[usize]], build: Build) -> Case {
        Case {
            name,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            build,
        }
    }
    vec![
        c("add", &[&[3, 4], &[3, 4]], |g, x| g.add(x[0], x[1])),
        c("sub", &[&[3, 4], &[3, 4]], |g, x| g.sub(x[0], x[1])),
        c("mul", &[&[3, 4], &[3, 4]], |g, x| g.mul(x[0], x[1])),
        c("scale", &[&[3, 4]], |g, x| Ok(g.scale(x[0], 1.7))),
        c("add_row", &[&[3, 4], &[4]], |g, x| g.add_row(x[0], x[1])),
        c("mul_row", &[&[3, 4], &[4]], |g, x| g.mul_row(x[0], x[1])),
        c("matmul", &[&[3, 5], &[5, 4]], |g, x| g.matmul(x[0], x[1])),
        c("linear", &[&[3, 5], &[5, 4], &[4]], |g, x| {
            g.linear(x[0], x[1], Some(x[2]))
        }),
        c("gelu", &[&[3, 4]], |g, x| Ok(g.gelu(x[0]))),
        c("silu", &[&[3, 4]], |g, x| Ok(g.silu(x[0]))),
        c("sigmoid", &[&[3, 4]], |g, x| Ok(g.sigmoid(x[0]))),
        c("modulated_layer_norm", &[&[3, 6], &[6], &[6]], |g, x| {
            g.modulated_layer_norm(x[0], x[1], x[2], 1e-5)
        }),
        c("attention", &[&[2, 3, 4], &[2, 5, 4], &[2, 5, 3]], |g, x| {
            g.attention(x[0], x[1], x[2])
        }),
        c("rope", &[&[5, 8]], |g, x| {
            g.rope(x[0], 2, (0..5).map(f64::from).collect())
        }),
        c("split_heads", &[&[3, 8]], |g, x| g.split_heads(x[0], 2)),
        c("merge_heads", &[&[2, 3, 4]], |g, x| g.merge_heads(x[0])),
        c("concat_rows", &[&[2, 4], &[3, 4]], |g, x| g.concat_rows(&[x[0], x[1]])),
        c("slice_rows", &[&[5, 4]], |g, x| g.slice_rows(x[0], 1, 3)),
        c("concat_cols", &[&[3, 2], &[3, 5]], |g, x| g.concat_cols(&[x[0], x[1]])),
        c("slice_cols", &[&[3, 6]], |g, x| g.slice_cols(x[0], 2, 3)),
        c("mean_rows", &[&[4, 3]], |g, x| g.mean_rows(x[0])),
        c("sum", &[&[3, 4]], |g, x| Ok(g.sum(x[0]))),
        c("mean", &[&[3, 4]], |g, x| Ok(g.mean(x[0]))),
        c("reshape", &[&[3, 4]], |g, x| g.reshape(x[0], &[12])),
        c("mse", &[&[3, 4], &[3, 4]], |g, x| g.mse(x[0], x[1])),
    ]
}

/// Scalar probe loss Σ out ⊙ r with a fixed random r.
fn probe(g: &mut Graph, out: Var, weights: &[f64]) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let r = g.constant_f64(&shape, weights.to_vec());
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

fn eval_case(
    case: &Case,
    inputs: &[Vec<f64>],
    weights: &mut Option<Vec<f64>>,
    rng: &mut Rng,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case
        .shapes
        .iter()
        .zip(inputs)
        .map(|(s, d)| g.leaf_f64(s, d.clone()))
        .collect::<Result<_>>()?;
    let out = (case.build)(&mut g, &vars)?;
    let n = g.value_f64(out).len();
    let w = weights.get_or_insert_with(|| (0..n).map(|_| rng.normal()).collect());
    let loss = probe(&mut g, out, w)?;
    let grads = g.backward(loss)?;
    let gs = vars
        .iter()
        .map(|&v| {
            grads
                .get_f64(v)
                .map_or_else(|| vec![0.0; g.value_f64(v).len()], <[f64]>::to_vec)
        })
        .collect();
    Ok((g.value_f64(loss)[0], gs))
}

fn check_primitive(case: &Case, rng: &mut Rng, corrupt: bool) -> Result<f64> {
    let inputs: Vec<Vec<f64>> = case
        .shapes
        .iter()
        .map(|s| (0..s.iter().product::<usize>()).map(|_| rng.normal()).collect())
        .collect();
    let mut weights = None;
    let (_, mut analytic) = eval_case(case, &inputs, &mut weights, rng)?;
    if corrupt {
        analytic.iter_mut().flatten().for_each(|a| *a *= 1.01);
    }
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[i][j] += STEP;
            let mut minus = inputs.clone();
            minus[i][j] -= STEP;
            let lp = eval_case(case, &plus, &mut weights, rng)?.0;
            let lm = eval_case(case, &minus, &mut weights, rng)?.0;
            numeric[j] = (lp - lm) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(&analytic[i], &numeric));
    }
    Ok(worst)
}

struct ModelProbe {
    cfg: ModelConfig,
    x: Vec<f64>,
    t: f64,
    target: Tensor,
    bundle: ConditionBundle,
}

impl ModelProbe {
    fn shape(&self) -> [usize; 2] {
        [self.cfg.latent_len, self.cfg.latent_dim]
    }

    fn loss(&self, params: &PreparedParams, x: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let p = Bound::bind(&mut g, params, false);
        let xv = g.constant_f64(&self.shape(), x.to_vec());
        let v = forward_graph(&mut g, &p, &self.cfg, xv, self.t, &self.bundle)?;
        let tv = g.constant(&self.target);
        let l = g.mse(v, tv)?;
        Ok(g.value_f64(l)[0])
    }

    /// Loss gradients for every parameter and for x_t.
    fn analytic(&self, params: &PreparedParams) -> Result<Vec<(String, Vec<f64>)>> {
        let mut g = Graph::new();
        let p = Bound::bind(&mut g, params, true);
        let xv = g.leaf_f64(&self.shape(), self.x.clone())?;
        let v = forward_graph(&mut g, &p, &self.cfg, xv, self.t, &self.bundle)?;
        let tv = g.constant(&self.target);
        let l = g.mse(v, tv)?;
        let grads = g.backward(l)?;
        let zeros = |n: usize| vec![0.0; n];
        let mut out = Vec::new();
        for name in params.names() {
            let n = params.data(name).map_or(0, <[f64]>::len);
            let gv = grads.get_f64(p.var(name)?).map_or_else(|| zeros(n), <[f64]>::to_vec);
            out.push((name.clone(), gv));
        }
        out.push((
            "x_t".into(),
            grads.get_f64(xv).map_or_else(|| zeros(self.x.len()), <[f64]>::to_vec),
        ));
        Ok(out)
    }
}

/// Probe indices: the largest analytic entry plus random others.
fn probe_indices(grad: &[f64], k: usize, rng: &mut Rng) -> Vec<usize> {
    let top = grad
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map_or(0, |(i, _)| i);
    let mut idx = vec![top];
    for i in rng.sample_indices(grad.len(), k) {
        if idx.len() >= k {
            break;
        }
        if i != top {
            idx.push(i);
        }
    }
    idx
}

fn model_probes(cfg: &ModelConfig, rng: &mut Rng) -> Vec<ModelProbe> {
    let (l, d) = (cfg.latent_len, cfg.latent_dim);
    let lv = (l / 2).max(1);
    let full = ConditionBundle {
        video_feats: Some(Tensor::randn(&[lv, cfg.video_dim], rng)),
        caption_emb: Some(Tensor::randn(&[cfg.caption_dim], rng)),
        cot_tokens: Some(Tensor::randn(&[2, cfg.text_dim], rng)),
        sync_feats: Some(Tensor::randn(&[lv, cfg.sync_dim], rng)),
        roi_feats: Some(Tensor::randn(&[lv, cfg.video_dim], rng)),
        audio_context: Some(Tensor::randn(&[l, d], rng)),
        context_mask: Some((0..l).map(|i| i % 3 != 1).collect()),
    };
    [full, ConditionBundle::empty()]
        .into_iter()
        .map(|bundle| ModelProbe {
            cfg: cfg.clone(),
            x: (0..l * d).map(|_| rng.normal()).collect(),
            t: rng.uniform_range(0.05, 0.95),
            target: Tensor::randn(&[l, d], rng),
            bundle,
        })
        .collect()
}

fn check_model(opts: &GradcheckOptions, rng: &mut Rng) -> Result<Vec<(String, f64)>> {
    let params = ModelParams::init_dense(&opts.model, &mut rng.fork())?.prepare();
    let mut worst: std::collections::BTreeMap<String, f64> = Default::default();
    for probe in model_probes(&opts.model, rng) {
        for (name, mut grad) in probe.analytic(&params)? {
            let key = format!("model:{name}");
            if opts.corrupt.as_deref() == Some(key.as_str()) {
                grad.iter_mut().for_each(|a| *a *= 1.01);
            }
            let idx = probe_indices(&grad, opts.probes, rng);
            let mut analytic = Vec::with_capacity(idx.len());
            let mut numeric = Vec::with_capacity(idx.len());
            for &i in &idx {
                let at = |delta: f64| -> Result<f64> {
                    if name == "x_t" {
                        let mut x = probe.x.clone();
                        x[i] += delta;
                        return probe.loss(&params, &x);
                    }
                    let mut p = params.clone();
                    let mut data = params.data(&name).unwrap_or_default().to_vec();
                    data[i] += delta;
                    p.set(&name, data)?;
                    probe.loss(&p, &probe.x)
                };
                numeric.push((at(STEP)? - at(-STEP)?) / (2.0 * STEP));
                analytic.push(grad[i]);
            }
            let e = relative_error(&analytic, &numeric);
            let w = worst.entry(key).or_insert(0.0);
            *w = w.max(e);
        }
    }
    Ok(worst.into_iter().collect())
}

/// Runs the whole suite.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    opts.model.validate()?;
    let mut rng = Rng::new(opts.seed);
    let mut entries = Vec::new();
    for case in cases() {
        let corrupt = opts.corrupt.as_deref() == Some(case.name);
        let e = check_primitive(&case, &mut rng.fork(), corrupt)?;
        entries.push(GradcheckEntry {
            name: case.name.to_string(),
            kind: "primitive".into(),
            max_rel_error: e,
            tolerance: PRIMITIVE_TOLERANCE,
            passed: e < PRIMITIVE_TOLERANCE,
        });
    }
    for (name, e) in check_model(opts, &mut rng.fork())? {
        entries.push(GradcheckEntry {
            name,
            kind: "model".into(),
            max_rel_error: e,
            tolerance: MODEL_TOLERANCE,
            passed: e < MODEL_TOLERANCE,
        });
    }
    let passed = entries.iter().all(|e| e.passed);
    Ok(GradcheckReport { entries, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0], &[1.01]) - 0.01 / 1.01).abs() < 1e-12);
    }

    #[test]
    fn every_primitive_passes() {
        let mut rng = Rng::new(1);
        for case in cases() {
            let e = check_primitive(&case, &mut rng, false).unwrap();
            assert!(e < PRIMITIVE_TOLERANCE, "{}: {e}", case.name);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let mut rng = Rng::new(2);
        let case = cases().into_iter().find(|c| c.name == "matmul").unwrap();
        assert!(check_primitive(&case, &mut rng, true).unwrap() > PRIMITIVE_TOLERANCE);
    }

    #[test]
    fn probes_include_the_largest_entry() {
        let idx = probe_indices(&[0.1, -5.0, 0.2, 0.3], 3, &mut Rng::new(3));
        assert_eq!(idx[0], 1);
        assert_eq!(idx.len(), 3);
        let mut s = idx.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 3);
    }
}
