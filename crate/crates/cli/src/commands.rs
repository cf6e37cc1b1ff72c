use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use foley_core::error::Error;
use foley_core::flowmatch::{
    edit_bundle, extend_tail, inpaint_span, read_loss_log, train_to_dir, EditExample, EditOp, TrainingState, LOSS_LOG,
};
use foley_core::gradcheck::{run_gradcheck, GradcheckOptions, GradcheckReport};
use foley_core::json;
use foley_core::metrics::{evaluate, EvalItem, MetricReport, ScorerSuite};
use foley_core::mmdit::{write_atomic, Checkpoint, ConditionBundle, Modality, Model};
use foley_core::sampler::{edit_sample, sample, SampleRecord, SampleSpec};
use foley_core::synthdata::{generate, Dataset, DatasetRecord, Manifest, World};
use foley_core::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub const TRAIN_FILE: &str = "train.ffds";
pub const TEST_FILE: &str = "test.ffds";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn file(self) -> &'static str {
        match self {
            Split::Train => TRAIN_FILE,
            Split::Test => TEST_FILE,
        }
    }
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = json::canonical_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// Sidecar path of a latent file.
pub fn sidecar_path(latent: &Path) -> PathBuf {
    latent.with_extension("json")
}

fn require_out(out: Option<&Path>, what: &str) -> anyhow::Result<PathBuf> {
    out.map(Path::to_path_buf)
        .ok_or_else(|| CliError::Usage(format!("{what} needs --out")).into())
}

#[derive(Serialize)]
struct ManifestFile<'a> {
    #[serde(flatten)]
    manifest: &'a Manifest,
    run_config: &'a RunConfig,
}

pub fn gen_data(cfg: &RunConfig, out: Option<&Path>) -> anyhow::Result<()> {
    let dir = require_out(out, "gen-data")?;
    let g = generate(&cfg.data)?;
    std::fs::create_dir_all(&dir)?;
    g.train.save(dir.join(TRAIN_FILE))?;
    g.test.save(dir.join(TEST_FILE))?;
    write_json(
        &dir.join(MANIFEST_FILE),
        &ManifestFile {
            manifest: &g.manifest,
            run_config: cfg,
        },
    )?;
    println!(
        "{} train / {} test records, difficulty {:?}, qc kept {} dropped {}",
        g.manifest.splits.train,
        g.manifest.splits.test,
        g.manifest.difficulty,
        g.manifest.qc.kept,
        g.manifest.qc.dropped,
    );
    Ok(())
}

fn load_split(data: &Path, split: Split) -> anyhow::Result<(Dataset, PathBuf)> {
    let path = data.join(split.file());
    if !path.exists() {
        bail!(Error::contract(format!(
            "{} not found; run gen-data with --out {} first",
            path.display(),
            data.display()
        )));
    }
    Ok((Dataset::load(&path)?, path))
}

#[derive(Serialize)]
struct TrainSidecar<'a> {
    run_config: &'a RunConfig,
    dataset_sha256: String,
    resumed_from_step: Option<u64>,
}

/// Keeps log lines at or before `step` so a resumed run continues the log.
fn truncate_log(path: &Path, step: u64) -> anyhow::Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path)?;
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::format(0, format!("{}: {e}", path.display())))?;
        if v["step"].as_u64().is_some_and(|s| s <= step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    write_atomic(path, kept.as_bytes())?;
    Ok(())
}

/// Every training knob except the step budget and checkpoint cadence must
/// match the run being resumed.
fn check_resume_config(
    saved: &foley_core::flowmatch::TrainConfig,
    now: &foley_core::flowmatch::TrainConfig,
) -> anyhow::Result<()> {
    let (a, b) = (serde_json::to_value(saved)?, serde_json::to_value(now)?);
    let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else {
        return Ok(());
    };
    for (k, v) in a {
        if k != "steps" && k != "checkpoint_every" && b.get(k) != Some(v) {
            bail!(Error::config(
                format!("train.{k}"),
                format!("checkpoint was trained with {v}")
            ));
        }
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, out: Option<&Path>, data: &Path, resume: Option<&Path>) -> anyhow::Result<()> {
    let dir = require_out(out, "train")?;
    let (ds, ds_path) = load_split(data, Split::Train)?;
    let mut cfg = cfg.clone();
    let (mut state, resumed) = match resume {
        Some(ck) => {
            let (state, saved, model) = TrainingState::load(ck)?;
            check_resume_config(&saved, &cfg.train)?;
            cfg.model = model;
            let step = state.step;
            (state, Some(step))
        }
        None => {
            ds.world.apply_to(&mut cfg.model);
            (TrainingState::init(&cfg.model, cfg.train.seed)?, None)
        }
    };
    ds.world.check_model(&cfg.model)?;
    std::fs::create_dir_all(&dir)?;
    truncate_log(&dir.join(LOSS_LOG), state.step)?;
    write_json(
        &dir.join(RUN_FILE),
        &TrainSidecar {
            run_config: &cfg,
            dataset_sha256: sha256_file(&ds_path)?,
            resumed_from_step: resumed,
        },
    )?;
    train_to_dir(&cfg.model, &cfg.train, &ds.records, &mut state, &dir)?;
    let log = read_loss_log(&dir.join(LOSS_LOG))?;
    match log.last() {
        Some((step, loss, _)) => println!("trained to step {step}, last loss {loss:.6}"),
        None => println!("no steps run; wrote initial checkpoints"),
    }
    Ok(())
}

/// Checkpoint, dataset and record that a sampling command starts from.
#[derive(Debug, Clone, clap::Args)]
pub struct Source {
    /// Model checkpoint (its `params` section is used).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    #[arg(long, default_value_t = 0)]
    pub record: usize,
}

struct Loaded {
    model: Model,
    world: World,
    record: DatasetRecord,
    checkpoint_sha256: String,
    dataset_sha256: String,
}

fn load_model(path: &Path) -> anyhow::Result<(Model, String)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((Model::new(ck.config, &ck.params)?, sha256_file(path)?))
}

impl Source {
    fn load(&self) -> anyhow::Result<Loaded> {
        let (model, checkpoint_sha256) = load_model(&self.checkpoint)?;
        let (ds, ds_path) = load_split(&self.data, self.split)?;
        ds.world.check_model(&model.config)?;
        let n = ds.records.len();
        let record = ds.records.into_iter().nth(self.record).ok_or_else(|| {
            CliError::Usage(format!(
                "--record {} out of range; the {:?} split has {n} records",
                self.record, self.split
            ))
        })?;
        Ok(Loaded {
            model,
            world: World::new(ds.world)?,
            record,
            checkpoint_sha256,
            dataset_sha256: sha256_file(&ds_path)?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub stage: String,
    pub run_config: RunConfig,
    pub sample: SampleRecord,
    /// Samples use seeds seed, seed + 1, ...
    pub count: usize,
    pub checkpoint_sha256: String,
    pub dataset_sha256: String,
    pub split: Split,
    pub record: usize,
    pub context_sha256: Option<String>,
    pub event: Option<usize>,
}

struct Emit<'a> {
    stage: &'a str,
    cfg: &'a RunConfig,
    src: &'a Source,
    loaded: &'a Loaded,
    bundle: &'a ConditionBundle,
    context: Option<&'a Path>,
    event: Option<usize>,
    edit: Option<EditOp>,
    count: usize,
}

fn emit(out: &Path, latent: &Tensor, e: Emit<'_>) -> anyhow::Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_atomic(out, &latent.to_bytes())?;
    let side = SampleSidecar {
        stage: e.stage.into(),
        run_config: e.cfg.clone(),
        sample: SampleRecord::new(&e.cfg.sample, e.bundle, e.edit),
        count: e.count,
        checkpoint_sha256: e.loaded.checkpoint_sha256.clone(),
        dataset_sha256: e.loaded.dataset_sha256.clone(),
        split: e.src.split,
        record: e.src.record,
        context_sha256: e.context.map(sha256_file).transpose()?,
        event: e.event,
    };
    write_json(&sidecar_path(out), &side)?;
    println!("wrote {} ({:?})", out.display(), latent.shape());
    Ok(())
}

fn spec_with_seed(spec: &SampleSpec, offset: usize) -> SampleSpec {
    SampleSpec {
        seed: spec.seed.wrapping_add(offset as u64),
        ..spec.clone()
    }
}

pub fn sample_cmd(cfg: &RunConfig, out: Option<&Path>, src: &Source, count: usize) -> anyhow::Result<()> {
    let out = require_out(out, "sample")?;
    if count == 0 {
        bail!(CliError::Usage("--count must be at least 1".into()));
    }
    let loaded = src.load()?;
    let bundle = loaded.record.bundle.clone();
    let latents: Vec<Tensor> = (0..count)
        .into_par_iter()
        .map(|k| sample(&loaded.model, &bundle, &spec_with_seed(&cfg.sample, k)))
        .collect::<Result<_, _>>()?;
    let latent = if count == 1 {
        latents.into_iter().next().expect("one sample")
    } else {
        let [l, d] = [loaded.model.config.latent_len, loaded.model.config.latent_dim];
        Tensor::new(
            vec![count, l, d],
            latents.into_iter().flat_map(Tensor::into_data).collect(),
        )?
    };
    emit(
        &out,
        &latent,
        Emit {
            stage: "sample",
            cfg,
            src,
            loaded: &loaded,
            bundle: &bundle,
            context: None,
            event: None,
            edit: None,
            count,
        },
    )
}

fn stage_base(record: &DatasetRecord) -> ConditionBundle {
    record.bundle.without(Modality::Context).without(Modality::Roi)
}

pub fn stage1(cfg: &RunConfig, out: Option<&Path>, src: &Source) -> anyhow::Result<()> {
    let out = require_out(out, "stage1")?;
    let loaded = src.load()?;
    let bundle = stage_base(&loaded.record);
    let latent = sample(&loaded.model, &bundle, &cfg.sample)?;
    emit(
        &out,
        &latent,
        Emit {
            stage: "stage1",
            cfg,
            src,
            loaded: &loaded,
            bundle: &bundle,
            context: None,
            event: None,
            edit: None,
            count: 1,
        },
    )
}

/// Loads a latent written by an earlier stage, checking its sidecar.
fn load_context(path: Option<&Path>, stage: &str, accepted: &[&str]) -> anyhow::Result<Tensor> {
    let need = accepted.join(" or ");
    let path = path.ok_or_else(|| Error::contract(format!("{stage} needs --context: the output of {need}")))?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| {
        Error::contract(format!(
            "{stage} needs a {need} output; cannot read {}: {e}",
            side.display()
        ))
    })?;
    let prior: SampleSidecar = serde_json::from_str(&text)?;
    if !accepted.contains(&prior.stage.as_str()) {
        bail!(Error::contract(format!(
            "{stage} needs a {need} output, got a {} output",
            prior.stage
        )));
    }
    Ok(Tensor::from_bytes(&std::fs::read(path)?)?)
}

pub fn stage2(
    cfg: &RunConfig,
    out: Option<&Path>,
    src: &Source,
    context: Option<&Path>,
    event: Option<usize>,
) -> anyhow::Result<()> {
    let out = require_out(out, "stage2")?;
    let ctx = load_context(context, "stage2", &["stage1"])?;
    let e = event.ok_or_else(|| Error::contract("stage2 needs an ROI selection: --event INDEX"))?;
    let loaded = src.load()?;
    let l = loaded.model.config.latent_len;
    let mut bundle = stage_base(&loaded.record).with_context(ctx, vec![true; l]);
    bundle.roi_feats = Some(loaded.world.roi_features(&loaded.record.script, e)?);
    let latent = sample(&loaded.model, &bundle, &cfg.sample)?;
    emit(
        &out,
        &latent,
        Emit {
            stage: "stage2",
            cfg,
            src,
            loaded: &loaded,
            bundle: &bundle,
            context,
            event: Some(e),
            edit: None,
            count: 1,
        },
    )
}

/// How stage3 builds its edit from the context.
#[derive(Debug, Clone, Default)]
pub struct EditTarget {
    pub event: Option<usize>,
    /// Frames [start, end) to regenerate.
    pub span: Option<(usize, usize)>,
    /// Leading frames kept by an extension.
    pub keep: Option<usize>,
}

fn edit_example(ctx: &Tensor, op: EditOp, target: &EditTarget, n_events: usize) -> anyhow::Result<EditExample> {
    Ok(match op {
        EditOp::Inpaint => {
            let (a, b) = target
                .span
                .ok_or_else(|| CliError::Usage("inpaint needs --span START:END".into()))?;
            inpaint_span(ctx, a, b)?
        }
        EditOp::Extend => {
            let keep = target
                .keep
                .ok_or_else(|| CliError::Usage("extend needs --keep FRAMES".into()))?;
            extend_tail(ctx, keep)?
        }
        EditOp::Add | EditOp::Remove => {
            let e = target
                .event
                .ok_or_else(|| CliError::Usage(format!("{op} needs --event INDEX")))?;
            if e >= n_events {
                bail!(Error::contract(format!("record has no event {e} (have {n_events})")));
            }
            EditExample {
                op,
                context: ctx.clone(),
                mask: vec![true; ctx.shape()[0]],
                target: ctx.clone(),
                event: Some(e),
            }
        }
    })
}

pub fn stage3(
    cfg: &RunConfig,
    out: Option<&Path>,
    src: &Source,
    context: Option<&Path>,
    op: EditOp,
    target: &EditTarget,
) -> anyhow::Result<()> {
    let out = require_out(out, "stage3")?;
    let ctx = load_context(context, "stage3", &["stage1", "stage2", "stage3"])?;
    let loaded = src.load()?;
    let ex = edit_example(&ctx, op, target, loaded.record.script.events.len())?;
    let bundle = edit_bundle(&stage_base(&loaded.record), &ex)?;
    let latent = edit_sample(&loaded.model, &bundle, op, &cfg.sample)?;
    emit(
        &out,
        &latent,
        Emit {
            stage: "stage3",
            cfg,
            src,
            loaded: &loaded,
            bundle: &bundle,
            context,
            event: ex.event,
            edit: Some(op),
            count: 1,
        },
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: MetricReport,
    pub run_config: RunConfig,
    /// Absent when the reference set was scored against itself.
    pub checkpoint_sha256: Option<String>,
    pub dataset_sha256: String,
    pub split: Split,
    /// Record i is sampled with seed sample.seed + i.
    pub sample_seed: u64,
}

pub fn eval(
    cfg: &RunConfig,
    out: Option<&Path>,
    checkpoint: Option<&Path>,
    data: &Path,
    split: Split,
) -> anyhow::Result<()> {
    let out = require_out(out, "eval")?;
    let (ds, ds_path) = load_split(data, split)?;
    let world = World::new(ds.world.clone())?;
    let suite = ScorerSuite::from_world(&world, cfg.eval.suite_seed.unwrap_or(ds.world.seed))?;
    let (generated, checkpoint_sha256) = match checkpoint {
        Some(ck) => {
            let (model, sha) = load_model(ck)?;
            ds.world.check_model(&model.config)?;
            let latents: Vec<Tensor> = ds
                .records
                .par_iter()
                .enumerate()
                .map(|(i, r)| sample(&model, &r.bundle, &spec_with_seed(&cfg.sample, i)))
                .collect::<Result<_, _>>()?;
            (latents, Some(sha))
        }
        None => (ds.records.iter().map(|r| r.x1.clone()).collect(), None),
    };
    let gen: Vec<EvalItem<'_>> = generated
        .iter()
        .zip(&ds.records)
        .map(|(latent, r)| EvalItem {
            latent,
            bundle: &r.bundle,
        })
        .collect();
    let reference: Vec<EvalItem<'_>> = ds
        .records
        .iter()
        .map(|r| EvalItem {
            latent: &r.x1,
            bundle: &r.bundle,
        })
        .collect();
    let metrics = evaluate(&gen, &reference, &suite, cfg.eval.flags())?;
    let report = EvalReport {
        metrics,
        run_config: cfg.clone(),
        checkpoint_sha256,
        dataset_sha256: sha256_file(&ds_path)?,
        split,
        sample_seed: cfg.sample.seed,
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_json(&out, &report)?;
    let m = &report.metrics;
    println!(
        "fd {:?} fd_stereo {:?} kl {:?} clap_cap {:?} clap_cot {:?} desync {:?}",
        m.fd, m.fd_stereo, m.kl, m.clap_cap, m.clap_cot, m.desync
    );
    for (k, v) in &m.errors {
        eprintln!("metric {k} unavailable: {v}");
    }
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, out: Option<&Path>, corrupt: Option<String>) -> anyhow::Result<GradcheckReport> {
    let report = run_gradcheck(&GradcheckOptions {
        seed: cfg.gradcheck.seed,
        model: cfg.model.clone(),
        probes: cfg.gradcheck.probes,
        corrupt,
    })?;
    let text = json::canonical_pretty(&report)?;
    println!("{text}");
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_truncation_keeps_earlier_steps() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(LOSS_LOG);
        std::fs::write(&p, "{\"step\":1}\n{\"step\":2}\n{\"step\":3}\n").unwrap();
        truncate_log(&p, 2).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "{\"step\":1}\n{\"step\":2}\n");
    }

    #[test]
    fn resume_rejects_changed_hyperparameters() {
        let a = foley_core::flowmatch::TrainConfig::default();
        let mut b = a.clone();
        b.steps += 10;
        b.checkpoint_every = 5;
        check_resume_config(&a, &b).unwrap();
        b.learning_rate *= 2.0;
        let e = check_resume_config(&a, &b).unwrap_err();
        assert!(e.to_string().contains("train.learning_rate"), "{e}");
    }

    #[test]
    fn edit_examples_need_their_arguments() {
        let ctx = Tensor::zeros(&[8, 4]);
        let none = EditTarget::default();
        for op in EditOp::ALL {
            let e = edit_example(&ctx, op, &none, 2).unwrap_err();
            assert!(e.downcast_ref::<CliError>().is_some(), "{op}: {e}");
        }
        let ex = edit_example(
            &ctx,
            EditOp::Inpaint,
            &EditTarget {
                span: Some((2, 5)),
                ..Default::default()
            },
            2,
        )
        .unwrap();
        assert_eq!(ex.mask.iter().filter(|m| !**m).count(), 3);
        let e = EditTarget {
            event: Some(2),
            ..Default::default()
        };
        assert!(edit_example(&ctx, EditOp::Remove, &e, 2).is_err());
    }
}
