use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{clap_score, desync, ScorerSuite, DESYNC_WINDOW_SECONDS};
use crate::mmdit::ConditionBundle;
use crate::rng::Rng;
use crate::tensor::{put_string, Cursor, Tensor};

use super::difficulty::{
    assign_difficulty, bands, human_audit_sample, qc_partition, AuditSample, Difficulty, QcLedger, QcOutcome, Scores,
    AUDIT_FRACTION,
};
use super::world::{EventScript, World, WorldConfig};

pub const DATASET_MAGIC: &[u8; 4] = b"FFDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub script: EventScript,
    pub bundle: ConditionBundle,
    pub x1: Tensor,
    /// One additive latent component per script event, in event order.
    pub event_components: Vec<Tensor>,
    /// σ-scaled noise; x1 = Σ components + ambient + noise in that order.
    pub noise: Tensor,
    pub difficulty: Option<Difficulty>,
    pub scores: Scores,
}

/// Alignment, sync and complexity scores of a rendered clip.
pub fn score_clip(suite: &ScorerSuite, x1: &Tensor, bundle: &ConditionBundle, n_events: usize) -> Result<Scores> {
    let audio = suite.align_audio(x1)?;
    let need = |t: &Option<Tensor>, what: &str| {
        t.clone()
            .ok_or_else(|| Error::contract(format!("scoring needs {what}")))
    };
    let video = need(&bundle.video_feats, "video features")?;
    let cot = need(&bundle.cot_tokens, "CoT tokens")?;
    let sync = need(&bundle.sync_feats, "sync features")?;
    let window = DESYNC_WINDOW_SECONDS.min(suite.clip_seconds());
    Ok(Scores {
        semantic: clap_score(&audio, &suite.align_video(&video)?)? as f32,
        clap: clap_score(&audio, &suite.align_cot(&cot)?)? as f32,
        desync: desync(x1, &sync, suite, suite.clip_seconds(), window)? as f32,
        n_events: n_events as u32,
    })
}

/// Renders and scores one record.
pub fn make_record(world: &World, suite: &ScorerSuite, script: &EventScript, rng: &mut Rng) -> Result<DatasetRecord> {
    let r = world.render(script, rng)?;
    let scores = score_clip(suite, &r.x1, &r.bundle, script.events.len())?;
    Ok(DatasetRecord {
        script: script.clone(),
        bundle: r.bundle,
        x1: r.x1,
        event_components: r.event_components,
        noise: r.noise,
        difficulty: None,
        scores,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub world: WorldConfig,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        put_string(&mut out, &crate::json::canonical(&self.world)?);
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            put_string(&mut out, &crate::json::canonical(&r.script)?);
            out.extend(r.bundle.to_bytes());
            out.extend(r.x1.to_bytes());
            out.extend_from_slice(&(r.event_components.len() as u32).to_le_bytes());
            for c in &r.event_components {
                out.extend(c.to_bytes());
            }
            out.extend(r.noise.to_bytes());
            out.push(r.difficulty.map_or(u8::MAX, Difficulty::code));
            let s = &r.scores;
            for v in [s.semantic, s.clap, s.desync, s.n_events as f32] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        if cur.take(4, "magic")? != DATASET_MAGIC {
            return Err(Error::format(0, "bad magic, expected FFDS"));
        }
        let version = cur.u32("version")?;
        if version != DATASET_VERSION {
            return Err(Error::format(4, format!("unsupported dataset version {version}")));
        }
        let at = cur.offset();
        let world: WorldConfig = serde_json::from_str(&cur.string("world config")?)
            .map_err(|e| Error::format(at, format!("world config: {e}")))?;
        let n = cur.u64("record count")?;
        let mut records = Vec::new();
        for _ in 0..n {
            let at = cur.offset();
            let script: EventScript =
                serde_json::from_str(&cur.string("script")?).map_err(|e| Error::format(at, format!("script: {e}")))?;
            let bundle = ConditionBundle::read(&mut cur)?;
            let x1 = cur.tensor()?;
            let nc = cur.u32("component count")?;
            let event_components = (0..nc).map(|_| cur.tensor()).collect::<Result<Vec<_>>>()?;
            let noise = cur.tensor()?;
            let at = cur.offset();
            let code = cur.u8("difficulty")?;
            let difficulty = match code {
                u8::MAX => None,
                c => Some(Difficulty::from_code(c).ok_or_else(|| Error::format(at, format!("bad difficulty {c}")))?),
            };
            let mut f = [0f32; 4];
            for v in f.iter_mut() {
                *v = cur.f32("scores")?;
            }
            records.push(DatasetRecord {
                script,
                bundle,
                x1,
                event_components,
                noise,
                difficulty,
                scores: Scores {
                    semantic: f[0],
                    clap: f[1],
                    desync: f[2],
                    n_events: f[3] as u32,
                },
            });
        }
        if cur.remaining() != 0 {
            return Err(Error::format(cur.offset(), "trailing bytes after records"));
        }
        Ok(Self { world, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::mmdit::write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn difficulty_counts(&self) -> BTreeMap<String, usize> {
        let mut m: BTreeMap<String, usize> = Difficulty::ALL.iter().map(|d| (d.name().to_string(), 0)).collect();
        for r in &self.records {
            if let Some(d) = r.difficulty {
                *m.get_mut(d.name()).expect("all names present") += 1;
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub world: WorldConfig,
    /// Records rendered before quality control.
    pub records: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_qc_threshold")]
    pub qc_threshold: f64,
    #[serde(default = "default_audit_fraction")]
    pub audit_fraction: f64,
    /// Fixed scripts drawn round-robin instead of random ones.
    #[serde(default)]
    pub scripts: Option<Vec<EventScript>>,
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_qc_threshold() -> f64 {
    0.2
}

fn default_audit_fraction() -> f64 {
    AUDIT_FRACTION
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            records: 300,
            test_fraction: default_test_fraction(),
            qc_threshold: default_qc_threshold(),
            audit_fraction: default_audit_fraction(),
            scripts: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generation: GenConfig,
    pub splits: SplitCounts,
    /// Tertile labels over all kept records.
    pub difficulty: BTreeMap<String, usize>,
    pub difficulty_train: BTreeMap<String, usize>,
    pub difficulty_test: BTreeMap<String, usize>,
    /// Majority-vote labels from the per-dimension band table.
    pub bands: BTreeMap<String, usize>,
    pub qc: QcLedger,
    pub audit: AuditSample,
    pub scorer_seed: u64,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub train: Dataset,
    pub test: Dataset,
    pub manifest: Manifest,
}

const RENDER_SALT: u64 = 0xD47A_5E7;
const REGEN_SALT: u64 = 0x8E6E_4E11;
const AUDIT_SALT: u64 = 0xA0D1_7;

/// Render, quality-filter, label and split a synthetic dataset.
pub fn generate(cfg: &GenConfig) -> Result<Generated> {
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(Error::config("test_fraction", "must lie in [0, 1)"));
    }
    if let Some(s) = &cfg.scripts {
        if s.is_empty() {
            return Err(Error::config("scripts", "must not be empty when given"));
        }
    }
    let world = World::new(cfg.world.clone())?;
    let suite = ScorerSuite::from_world(&world, cfg.world.seed)?;
    let mut root = Rng::new(cfg.world.seed ^ RENDER_SALT);
    let mut records = Vec::with_capacity(cfg.records);
    for i in 0..cfg.records {
        let mut rng = root.fork();
        let script = match &cfg.scripts {
            Some(s) => s[i % s.len()].clone(),
            None => world.random_script(&mut rng),
        };
        records.push(make_record(&world, &suite, &script, &mut rng)?);
    }

    let clap: Vec<f64> = records.iter().map(|r| r.scores.clap as f64).collect();
    let mut regen_root = Rng::new(cfg.world.seed ^ REGEN_SALT);
    let qc = qc_partition(&clap, cfg.qc_threshold, |i| {
        let mut rng = regen_root.fork();
        let r = &mut records[i];
        r.bundle.cot_tokens = Some(world.cot_tokens(&r.script.events, &mut rng));
        r.scores = score_clip(&suite, &r.x1, &r.bundle, r.script.events.len())?;
        Ok(r.scores.clap as f64)
    })?;
    let mut kept: Vec<DatasetRecord> = records
        .into_iter()
        .zip(&qc.outcomes)
        .filter(|(_, o)| **o != QcOutcome::Dropped)
        .map(|(r, _)| r)
        .collect();

    let scores: Vec<Scores> = kept.iter().map(|r| r.scores).collect();
    let labels = assign_difficulty(&scores)?;
    let mut band_counts: BTreeMap<String, usize> = Difficulty::ALL.iter().map(|d| (d.name().to_string(), 0)).collect();
    for (r, l) in kept.iter_mut().zip(labels) {
        r.difficulty = Some(l);
        *band_counts
            .get_mut(bands(&r.scores).overall.name())
            .expect("all names present") += 1;
    }
    let audit = human_audit_sample(
        kept.len(),
        cfg.audit_fraction,
        &mut Rng::new(cfg.world.seed ^ AUDIT_SALT),
    )?;

    let n_test = (cfg.test_fraction * kept.len() as f64).floor() as usize;
    let test_records = kept.split_off(kept.len() - n_test);
    let train = Dataset {
        world: cfg.world.clone(),
        records: kept,
    };
    let test = Dataset {
        world: cfg.world.clone(),
        records: test_records,
    };
    let mut difficulty = train.difficulty_counts();
    for (k, v) in test.difficulty_counts() {
        *difficulty.entry(k).or_default() += v;
    }
    let manifest = Manifest {
        generation: cfg.clone(),
        splits: SplitCounts {
            train: train.records.len(),
            test: test.records.len(),
        },
        difficulty,
        difficulty_train: train.difficulty_counts(),
        difficulty_test: test.difficulty_counts(),
        bands: band_counts,
        qc: qc.ledger,
        audit,
        scorer_seed: suite.seed,
    };
    Ok(Generated { train, test, manifest })
}
