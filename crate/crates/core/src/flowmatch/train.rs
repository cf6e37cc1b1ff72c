use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json;
use crate::mmdit::{write_atomic, Checkpoint, ModelConfig, ModelParams};
use crate::rng::Rng;
use crate::synthdata::DatasetRecord;
use crate::tensor::{put_string, Cursor, Tensor};

use super::config::TrainConfig;
use super::loss::{example_gradients, sample_example};
use super::optim::{ema_update, AdamW};

pub const OPTIMIZER_MAGIC: &[u8; 4] = b"FFOS";
pub const OPTIMIZER_VERSION: u32 = 1;

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub params: ModelParams,
    pub ema: ModelParams,
    /// Adam first and second moments per parameter.
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng: Rng,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    /// Wall-clock time of the step; the only non-reproducible field.
    pub wall_ms: f64,
}

impl TrainingState {
    /// Fresh parameters drawn from `seed`; EMA starts equal to them.
    pub fn init(model: &ModelConfig, seed: u64) -> Result<Self> {
        let mut root = Rng::new(seed);
        let params = ModelParams::init(model, &mut root.fork())?;
        Self::from_params(params, root)
    }

    pub fn from_params(params: ModelParams, rng: Rng) -> Result<Self> {
        let moments = params
            .iter()
            .map(|(k, t)| (k.clone(), (vec![0.0; t.numel()], vec![0.0; t.numel()])))
            .collect();
        Ok(Self {
            ema: params.clone(),
            params,
            moments,
            step: 0,
            rng,
        })
    }

    pub fn checkpoint(&self, model: &ModelConfig) -> Result<Checkpoint> {
        Checkpoint::new(model.clone(), self.params.clone(), self.ema.clone())
    }

    /// `FFOS` optimizer sidecar: step, RNG state, the training config and the
    /// Adam moments, sealed with a CRC-32.
    pub fn optimizer_bytes(&self, cfg: &TrainConfig) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(OPTIMIZER_MAGIC);
        out.extend_from_slice(&OPTIMIZER_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.state().to_le_bytes());
        put_string(&mut out, &json::canonical(cfg)?);
        out.extend_from_slice(&(self.moments.len() as u32).to_le_bytes());
        for (name, (m, v)) in &self.moments {
            put_string(&mut out, name);
            out.extend_from_slice(&(m.len() as u64).to_le_bytes());
            for x in m.iter().chain(v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Rebuilds a state from a checkpoint and its optimizer sidecar.
    pub fn from_parts(ck: &Checkpoint, optimizer: &[u8]) -> Result<(Self, TrainConfig)> {
        if optimizer.len() < 8 {
            return Err(Error::format(optimizer.len(), "optimizer state too short"));
        }
        let body = &optimizer[..optimizer.len() - 4];
        let mut stored = [0u8; 4];
        stored.copy_from_slice(&optimizer[optimizer.len() - 4..]);
        if u32::from_le_bytes(stored) != crc32fast::hash(body) {
            return Err(Error::format(body.len(), "optimizer state checksum mismatch"));
        }
        let mut cur = Cursor::new(body);
        if cur.take(4, "magic")? != OPTIMIZER_MAGIC {
            return Err(Error::format(0, "bad magic, expected FFOS"));
        }
        let version = cur.u32("version")?;
        if version != OPTIMIZER_VERSION {
            return Err(Error::format(
                4,
                format!("unsupported optimizer state version {version}"),
            ));
        }
        let step = cur.u64("step")?;
        let rng = Rng::from_state(cur.u64("rng state")?);
        let at = cur.offset();
        let cfg: TrainConfig = serde_json::from_str(&cur.string("train config")?)
            .map_err(|e| Error::format(at, format!("train config: {e}")))?;
        let n = cur.u32("moment count")?;
        let mut moments = BTreeMap::new();
        for _ in 0..n {
            let name = cur.string("parameter name")?;
            let len = cur.u64("moment length")? as usize;
            let raw = cur.take(16 * len, "moments")?;
            let vals: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let expect = ck.params.get(&name)?.numel();
            if len != expect {
                return Err(Error::format(
                    cur.offset(),
                    format!("{name}: {len} moments for {expect} values"),
                ));
            }
            moments.insert(name, (vals[..len].to_vec(), vals[len..].to_vec()));
        }
        if cur.remaining() != 0 {
            return Err(Error::format(cur.offset(), "trailing bytes before checksum"));
        }
        if !moments.keys().eq(ck.params.names()) {
            return Err(Error::contract(
                "optimizer state and checkpoint name different parameters",
            ));
        }
        let state = Self {
            params: ck.params.clone(),
            ema: ck.ema.clone(),
            moments,
            step,
            rng,
        };
        Ok((state, cfg))
    }

    /// Writes `<stem>.ffck` and `<stem>.ffos` under `dir`.
    pub fn save(&self, model: &ModelConfig, cfg: &TrainConfig, dir: &Path, stem: &str) -> Result<PathBuf> {
        let ck = dir.join(format!("{stem}.ffck"));
        self.checkpoint(model)?.save(&ck)?;
        write_atomic(&dir.join(format!("{stem}.ffos")), &self.optimizer_bytes(cfg)?)?;
        Ok(ck)
    }

    /// Loads a checkpoint and the `.ffos` file next to it.
    pub fn load(checkpoint: &Path) -> Result<(Self, TrainConfig, ModelConfig)> {
        let ck = Checkpoint::load(checkpoint)?;
        let opt_path = checkpoint.with_extension("ffos");
        let bytes = std::fs::read(&opt_path)
            .map_err(|e| Error::contract(format!("resume needs optimizer state {}: {e}", opt_path.display())))?;
        let (state, cfg) = Self::from_parts(&ck, &bytes)?;
        Ok((state, cfg, ck.config))
    }
}

fn first_non_finite(grads: &BTreeMap<String, Vec<f64>>) -> Option<&str> {
    grads
        .iter()
        .find(|(_, g)| g.iter().any(|x| !x.is_finite()))
        .map(|(k, _)| k.as_str())
}

/// One optimizer step on a batch drawn with replacement.
pub fn train_step(
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &[DatasetRecord],
    state: &mut TrainingState,
) -> Result<StepLog> {
    if data.is_empty() {
        return Err(Error::EmptyInput {
            op: "train",
            detail: "dataset has no records".into(),
        });
    }
    let start = Instant::now();
    let step = state.step + 1;
    let mut step_rng = state.rng.fork();
    let picks: Vec<(usize, Rng)> = (0..cfg.batch_size)
        .map(|_| {
            let i = step_rng.below(data.len());
            (i, step_rng.fork())
        })
        .collect();
    let prepared = state.params.prepare();
    let results: Vec<Result<(f64, BTreeMap<String, Vec<f64>>)>> = picks
        .into_par_iter()
        .map(|(i, mut rng)| {
            let ex = sample_example(&data[i], cfg, &mut rng)?;
            example_gradients(&prepared, model, &ex)
        })
        .collect();

    let b = cfg.batch_size as f64;
    let mut loss = 0.0;
    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in results {
        let (l, g) = r?;
        loss += l;
        for (name, gv) in g {
            match grads.get_mut(&name) {
                Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, x)| *a += x),
                None => {
                    grads.insert(name, gv);
                }
            }
        }
    }
    loss /= b;
    grads.values_mut().for_each(|g| g.iter_mut().for_each(|x| *x /= b));
    let grad_norm = grads.values().flatten().map(|x| x * x).sum::<f64>().sqrt();
    if !loss.is_finite() || !grad_norm.is_finite() {
        let culprit = first_non_finite(&grads).unwrap_or("none (loss only)");
        return Err(Error::NonFinite(format!(
            "step {step}: loss {loss}, first non-finite gradient in parameter {culprit}"
        )));
    }

    let opt = AdamW {
        lr: cfg.learning_rate,
        beta1: cfg.adam_betas[0],
        beta2: cfg.adam_betas[1],
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    };
    let mut updated = BTreeMap::new();
    for (name, t) in state.params.iter() {
        let (m, v) = state
            .moments
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("no optimizer moments for {name}")))?;
        let mut p = t.to_f64();
        opt.update(&mut p, &grads[name], m, v, step);
        if let Some(i) = p.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "step {step}: parameter {name} element {i} became non-finite"
            )));
        }
        let mut e = state.ema.get(name)?.to_f64();
        ema_update(&mut e, &p, cfg.ema_decay);
        updated.insert(
            name.clone(),
            (Tensor::from_f64(t.shape(), &p), Tensor::from_f64(t.shape(), &e)),
        );
    }
    for (name, (p, e)) in updated {
        state.ema.insert(name.clone(), e);
        state.params.insert(name, p);
    }
    state.step = step;
    Ok(StepLog {
        step,
        loss,
        grad_norm,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Steps until `cfg.steps` is reached, calling `on_step` after each.
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &[DatasetRecord],
    state: &mut TrainingState,
    mut on_step: impl FnMut(&StepLog, &TrainingState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    model.validate()?;
    state.params.check_against(model)?;
    while state.step < cfg.steps {
        let log = train_step(model, cfg, data, state)?;
        on_step(&log, state)?;
    }
    Ok(())
}

/// File names written by [`train_to_dir`].
pub const LOSS_LOG: &str = "loss.jsonl";
pub const FINAL_STEM: &str = "final";
pub const EMA_CHECKPOINT: &str = "ema.ffck";

/// Trains while appending the loss log, writing `step-NNNNNN` checkpoints at
/// the configured cadence, then `final.ffck`/`final.ffos` and `ema.ffck`
/// (EMA weights as the parameters).
pub fn train_to_dir(
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &[DatasetRecord],
    state: &mut TrainingState,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let log_file: File = OpenOptions::new().create(true).append(true).open(dir.join(LOSS_LOG))?;
    let mut log = BufWriter::new(log_file);
    train(model, cfg, data, state, |line, st| {
        writeln!(log, "{}", json::canonical(line)?)?;
        if cfg.checkpoint_every > 0 && line.step % cfg.checkpoint_every == 0 {
            log.flush()?;
            st.save(model, cfg, dir, &format!("step-{:06}", line.step))?;
        }
        Ok(())
    })?;
    log.flush()?;
    state.save(model, cfg, dir, FINAL_STEM)?;
    Checkpoint::new(model.clone(), state.ema.clone(), state.ema.clone())?.save(dir.join(EMA_CHECKPOINT))?;
    Ok(())
}

/// Parses a loss log, dropping the wall-clock field.
pub fn read_loss_log(path: &Path) -> Result<Vec<(u64, f64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let s: StepLog = serde_json::from_str(l)?;
            Ok((s.step, s.loss, s.grad_norm))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, GenConfig};

    fn data(n: usize) -> Vec<DatasetRecord> {
        generate(&GenConfig {
            records: n,
            test_fraction: 0.0,
            ..GenConfig::default()
        })
        .unwrap()
        .train
        .records
    }

    fn quick(steps: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 2,
            learning_rate: 1e-3,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let model = ModelConfig::toy();
        let d = data(4);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..quick(3)
        };
        let mut st = TrainingState::init(&model, 1).unwrap();
        let before = st.params.clone();
        train(&model, &cfg, &d, &mut st, |_, _| Ok(())).unwrap();
        assert!(st.params.bit_eq(&before));
        assert!(st.ema.bit_eq(&before));
    }

    #[test]
    fn runs_are_reproducible_and_resume_exactly() {
        let model = ModelConfig::toy();
        let d = data(6);
        let cfg = quick(6);
        let mut full = TrainingState::init(&model, 1).unwrap();
        let mut logs = Vec::new();
        let mut mid = None;
        train(&model, &cfg, &d, &mut full, |l, s| {
            logs.push((l.step, l.loss, l.grad_norm));
            if l.step == 3 {
                mid = Some((s.checkpoint(&model)?, s.optimizer_bytes(&cfg)?));
            }
            Ok(())
        })
        .unwrap();
        let (ck, opt) = mid.unwrap();
        let ck = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let (mut resumed, stored) = TrainingState::from_parts(&ck, &opt).unwrap();
        assert_eq!(stored, cfg);
        assert_eq!(resumed.step, 3);
        let mut tail = Vec::new();
        train(&model, &cfg, &d, &mut resumed, |l, _| {
            tail.push((l.step, l.loss, l.grad_norm));
            Ok(())
        })
        .unwrap();
        assert_eq!(tail, logs[3..].to_vec());
        assert!(resumed.params.bit_eq(&full.params));
        assert_eq!(resumed, full);
    }

    #[test]
    fn optimizer_sidecar_detects_corruption() {
        let model = ModelConfig::toy();
        let st = TrainingState::init(&model, 2).unwrap();
        let mut bytes = st.optimizer_bytes(&quick(1)).unwrap();
        let ck = st.checkpoint(&model).unwrap();
        assert!(TrainingState::from_parts(&ck, &bytes).is_ok());
        let n = bytes.len();
        bytes[n / 2] ^= 4;
        assert!(TrainingState::from_parts(&ck, &bytes)
            .unwrap_err()
            .to_string()
            .contains("checksum"));
    }

    #[test]
    fn non_finite_loss_names_step_and_parameter() {
        let model = ModelConfig::toy();
        let d = data(3);
        let mut st = TrainingState::init(&model, 1).unwrap();
        let w = st.params.get("final.out.w").unwrap().clone();
        st.params.insert("final.out.w", w.map(|_| f32::NAN));
        let err = train_step(&model, &quick(1), &d, &mut st).unwrap_err();
        let msg = err.to_string();
        assert!(err.is_numeric(), "{msg}");
        assert!(msg.contains("step 1") && msg.contains("parameter"), "{msg}");
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let model = ModelConfig::toy();
        let mut st = TrainingState::init(&model, 1).unwrap();
        assert!(matches!(
            train_step(&model, &quick(1), &[], &mut st),
            Err(Error::EmptyInput { .. })
        ));
    }

    #[test]
    fn directory_run_writes_artifacts() {
        let model = ModelConfig::toy();
        let d = data(3);
        let dir = std::env::temp_dir().join(format!("ffos-train-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let cfg = TrainConfig {
            checkpoint_every: 2,
            ..quick(4)
        };
        let mut st = TrainingState::init(&model, 1).unwrap();
        train_to_dir(&model, &cfg, &d, &mut st, &dir).unwrap();
        let log = read_loss_log(&dir.join(LOSS_LOG)).unwrap();
        assert_eq!(log.iter().map(|l| l.0).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        for f in [
            "step-000002.ffck",
            "step-000004.ffos",
            "final.ffck",
            "final.ffos",
            "ema.ffck",
        ] {
            assert!(dir.join(f).exists(), "{f}");
        }
        let (back, _, m) = TrainingState::load(&dir.join("final.ffck")).unwrap();
        assert_eq!(back, st);
        assert_eq!(m, model);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
