use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmdit::ConditionBundle;
use crate::tensor::Tensor;

use super::divergence::{clap_score, desync, kl_labels, KlDirection};
use super::scorers::{ScorerSuite, EMBED_DIM, SHARED_DIM};
use super::stats::{embed_stats, frechet_distance, stereo_fd};

/// DeSync window length in seconds.
pub const DESYNC_WINDOW_SECONDS: f64 = 4.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalFlags {
    pub kl_direction: KlDirection,
    pub window_seconds: f64,
}

impl Default for EvalFlags {
    fn default() -> Self {
        Self {
            kl_direction: KlDirection::default(),
            window_seconds: DESYNC_WINDOW_SECONDS,
        }
    }
}

/// One clip to score: a latent and the conditions it was generated from.
#[derive(Debug, Clone, Copy)]
pub struct EvalItem<'a> {
    pub latent: &'a Tensor,
    pub bundle: &'a ConditionBundle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub suite_seed: u64,
    pub kl_direction: KlDirection,
    /// KL is the mean over generated/reference pairs.
    pub kl_reduction: String,
    pub covariance: String,
    /// Eigenvalues below this are set to it before square roots.
    pub eigenvalue_clamp: f64,
    pub clip_seconds: f64,
    pub window_seconds: f64,
    pub embed_dim: usize,
    pub shared_dim: usize,
    pub generated: usize,
    pub reference: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fd: Option<f64>,
    pub fd_stereo: Option<f64>,
    pub kl: Option<f64>,
    /// Audio against the caption embedding.
    pub clap_cap: Option<f64>,
    /// Audio against the CoT tokens.
    pub clap_cot: Option<f64>,
    pub desync: Option<f64>,
    /// Metric name → reason it is missing.
    pub errors: BTreeMap<String, String>,
    pub protocol: Protocol,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn record(slot: &mut Option<f64>, errors: &mut BTreeMap<String, String>, name: &str, r: Result<f64>) {
    match r {
        Ok(v) if v.is_finite() => *slot = Some(v),
        Ok(v) => {
            errors.insert(name.into(), format!("non-finite value {v}"));
        }
        Err(e) => {
            errors.insert(name.into(), e.to_string());
        }
    }
}

fn collect<T>(items: &[EvalItem<'_>], f: impl Fn(&EvalItem<'_>) -> Result<T>) -> Result<Vec<T>> {
    items.iter().map(f).collect()
}

fn fd_mono(suite: &ScorerSuite, gen: &[EvalItem<'_>], reference: &[EvalItem<'_>]) -> Result<f64> {
    let a = embed_stats(&collect(gen, |i| suite.embed(i.latent))?)?;
    let b = embed_stats(&collect(reference, |i| suite.embed(i.latent))?)?;
    frechet_distance(&a, &b)
}

fn fd_stereo(suite: &ScorerSuite, gen: &[EvalItem<'_>], reference: &[EvalItem<'_>]) -> Result<f64> {
    let (gl, gr): (Vec<_>, Vec<_>) = collect(gen, |i| suite.embed_stereo(i.latent))?.into_iter().unzip();
    let (rl, rr): (Vec<_>, Vec<_>) = collect(reference, |i| suite.embed_stereo(i.latent))?
        .into_iter()
        .unzip();
    stereo_fd(
        &embed_stats(&gl)?,
        &embed_stats(&gr)?,
        &embed_stats(&rl)?,
        &embed_stats(&rr)?,
    )
}

fn clap_with(
    suite: &ScorerSuite,
    gen: &[EvalItem<'_>],
    text: impl Fn(&ConditionBundle) -> Option<Result<Vec<f64>>>,
    what: &str,
) -> Result<f64> {
    let mut scores = Vec::new();
    for item in gen {
        if let Some(t) = text(item.bundle) {
            scores.push(clap_score(&suite.align_audio(item.latent)?, &t?)?);
        }
    }
    if scores.is_empty() {
        return Err(Error::contract(format!("no generated clip carries {what}")));
    }
    Ok(mean(&scores))
}

fn desync_mean(suite: &ScorerSuite, gen: &[EvalItem<'_>], window: f64) -> Result<f64> {
    let mut scores = Vec::new();
    for item in gen {
        if let Some(s) = &item.bundle.sync_feats {
            scores.push(desync(item.latent, s, suite, suite.clip_seconds(), window)?);
        }
    }
    if scores.is_empty() {
        return Err(Error::contract("no generated clip carries sync features"));
    }
    Ok(mean(&scores))
}

/// Runs every metric that applies; failures are noted per metric and the
/// rest of the report is still produced.
pub fn evaluate(
    generated: &[EvalItem<'_>],
    reference: &[EvalItem<'_>],
    suite: &ScorerSuite,
    flags: EvalFlags,
) -> Result<MetricReport> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::EmptyInput {
            op: "evaluate",
            detail: format!("{} generated, {} reference clips", generated.len(), reference.len()),
        });
    }
    let mut report = MetricReport {
        fd: None,
        fd_stereo: None,
        kl: None,
        clap_cap: None,
        clap_cot: None,
        desync: None,
        errors: BTreeMap::new(),
        protocol: Protocol {
            suite_seed: suite.seed,
            kl_direction: flags.kl_direction,
            kl_reduction: "per_pair_mean".into(),
            covariance: "unbiased".into(),
            eigenvalue_clamp: 0.0,
            clip_seconds: suite.clip_seconds(),
            window_seconds: flags.window_seconds,
            embed_dim: EMBED_DIM,
            shared_dim: SHARED_DIM,
            generated: generated.len(),
            reference: reference.len(),
        },
    };
    let errs = &mut report.errors;
    record(&mut report.fd, errs, "fd", fd_mono(suite, generated, reference));
    record(
        &mut report.fd_stereo,
        errs,
        "fd_stereo",
        fd_stereo(suite, generated, reference),
    );
    let kl = collect(generated, |i| suite.classify(i.latent)).and_then(|g| {
        let r = collect(reference, |i| suite.classify(i.latent))?;
        kl_labels(&g, &r, flags.kl_direction)
    });
    record(&mut report.kl, errs, "kl", kl);
    let cap = clap_with(
        suite,
        generated,
        |b| b.caption_emb.as_ref().map(|c| suite.align_caption(c)),
        "a caption",
    );
    record(&mut report.clap_cap, errs, "clap_cap", cap);
    let cot = clap_with(
        suite,
        generated,
        |b| b.cot_tokens.as_ref().map(|c| suite.align_cot(c)),
        "CoT tokens",
    );
    record(&mut report.clap_cot, errs, "clap_cot", cot);
    record(
        &mut report.desync,
        errs,
        "desync",
        desync_mean(suite, generated, flags.window_seconds),
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::synthdata::{Event, EventScript, World, WorldConfig};

    fn population(w: &World, types: &[usize], n: usize, seed: u64) -> Vec<(Tensor, ConditionBundle)> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|i| {
                let e = Event {
                    event_type: types[i % types.len()],
                    onset: rng.uniform_range(0.0, 0.3),
                    duration: 0.6,
                    amplitude: rng.uniform_range(0.8, 1.2),
                };
                let r = w.render(&EventScript::new(vec![e]), &mut rng).unwrap();
                (r.x1, r.bundle)
            })
            .collect()
    }

    fn items(p: &[(Tensor, ConditionBundle)]) -> Vec<EvalItem<'_>> {
        p.iter().map(|(latent, bundle)| EvalItem { latent, bundle }).collect()
    }

    #[test]
    fn reference_against_itself() {
        let w = World::new(WorldConfig::default()).unwrap();
        let suite = ScorerSuite::from_world(&w, 1).unwrap();
        let pop = population(&w, &[0, 1, 2, 3], 40, 2);
        let r = evaluate(&items(&pop), &items(&pop), &suite, EvalFlags::default()).unwrap();
        assert!(r.fd.unwrap() < 1e-6);
        assert!(r.fd_stereo.unwrap() < 1e-6);
        assert!(r.kl.unwrap().abs() < 1e-12);
        assert!(r.errors.is_empty(), "{:?}", r.errors);
        assert_eq!((r.protocol.generated, r.protocol.reference), (40, 40));
    }

    #[test]
    fn disjoint_types_raise_fd() {
        let w = World::new(WorldConfig::default()).unwrap();
        let suite = ScorerSuite::from_world(&w, 1).unwrap();
        let a = population(&w, &[0, 1], 60, 3);
        let a2 = population(&w, &[0, 1], 60, 4);
        let b = population(&w, &[2, 3], 60, 5);
        let same = evaluate(&items(&a2), &items(&a), &suite, EvalFlags::default()).unwrap();
        let diff = evaluate(&items(&b), &items(&a), &suite, EvalFlags::default()).unwrap();
        assert!(diff.fd.unwrap() > same.fd.unwrap());
    }

    #[test]
    fn report_json_round_trips() {
        let w = World::new(WorldConfig::default()).unwrap();
        let suite = ScorerSuite::from_world(&w, 1).unwrap();
        let a = population(&w, &[0, 1], 12, 6);
        let b = population(&w, &[1, 2], 10, 7);
        let r = evaluate(&items(&a), &items(&b), &suite, EvalFlags::default()).unwrap();
        assert!(r.errors.contains_key("kl"));
        let json = crate::json::canonical(&r).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
