use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }
}

/// Per-record scoring dimensions. Stored as f32 on disk, so kept as f32.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// Audio–visual alignment.
    pub semantic: f32,
    /// Audio–CoT alignment.
    pub clap: f32,
    pub desync: f32,
    pub n_events: u32,
}

/// Composite weights: one unit per band step of each dimension
/// (semantic bands are 0.05 wide, CLAP 0.1, DeSync 0.3, event count 1.5).
pub const W_SEMANTIC: f64 = 20.0;
pub const W_CLAP: f64 = 10.0;
pub const W_DESYNC: f64 = 10.0 / 3.0;
pub const W_EVENTS: f64 = 2.0 / 3.0;

/// Higher is harder: alignment terms enter negated.
pub fn composite(s: &Scores) -> f64 {
    -W_SEMANTIC * s.semantic as f64 - W_CLAP * s.clap as f64 + W_DESYNC * s.desync as f64 + W_EVENTS * s.n_events as f64
}

/// Tertile labels by ascending composite, ties broken by index:
/// [0, ⌊n/3⌋) easy, [⌊n/3⌋, ⌊2n/3⌋) medium, rest hard.
pub fn assign_difficulty(scores: &[Scores]) -> Result<Vec<Difficulty>> {
    let n = scores.len();
    if n < 3 {
        return Err(Error::contract(format!(
            "difficulty tertiles need at least 3 records, got {n}"
        )));
    }
    let keys: Vec<f64> = scores.iter().map(composite).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b)));
    let mut out = vec![Difficulty::Medium; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n / 3 {
            Difficulty::Easy
        } else if rank < 2 * n / 3 {
            Difficulty::Medium
        } else {
            Difficulty::Hard
        };
    }
    Ok(out)
}

/// Per-dimension band labels from the threshold table, plus a majority vote.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bands {
    pub semantic: Difficulty,
    pub clap: Difficulty,
    pub desync: Difficulty,
    pub events: Difficulty,
    /// Most frequent label; medium on a tie.
    pub overall: Difficulty,
}

pub fn bands(s: &Scores) -> Bands {
    let tier = |easy: bool, medium: bool| {
        if easy {
            Difficulty::Easy
        } else if medium {
            Difficulty::Medium
        } else {
            Difficulty::Hard
        }
    };
    let semantic = tier(s.semantic >= 0.3, s.semantic >= 0.25);
    let clap = tier(s.clap >= 0.4, s.clap >= 0.3);
    let desync = tier(s.desync <= 0.3, s.desync <= 0.6);
    let events = tier(s.n_events <= 1, s.n_events <= 3);
    let votes = [semantic, clap, desync, events];
    let count = |d| votes.iter().filter(|&&v| v == d).count();
    let best = Difficulty::ALL.iter().map(|&d| count(d)).max().unwrap_or(0);
    let winners: Vec<Difficulty> = Difficulty::ALL.into_iter().filter(|&d| count(d) == best).collect();
    let overall = if winners.len() == 1 {
        winners[0]
    } else {
        Difficulty::Medium
    };
    Bands {
        semantic,
        clap,
        desync,
        events,
        overall,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QcOutcome {
    Kept,
    RegeneratedKept,
    Dropped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcLedger {
    pub threshold: f64,
    pub input: usize,
    /// Kept, including records kept after regeneration.
    pub kept: usize,
    /// Records that went through one regeneration.
    pub regenerated: usize,
    pub regenerated_kept: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QcReport {
    pub outcomes: Vec<QcOutcome>,
    pub ledger: QcLedger,
}

/// Scores at or above `threshold` are kept; the rest get one call to
/// `regenerate`, which returns the new score, and are dropped if still low.
pub fn qc_partition(
    scores: &[f64],
    threshold: f64,
    mut regenerate: impl FnMut(usize) -> Result<f64>,
) -> Result<QcReport> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config("qc.threshold", "must lie in (0, 1)"));
    }
    let mut outcomes = Vec::with_capacity(scores.len());
    for (i, &s) in scores.iter().enumerate() {
        outcomes.push(if s >= threshold {
            QcOutcome::Kept
        } else if regenerate(i)? >= threshold {
            QcOutcome::RegeneratedKept
        } else {
            QcOutcome::Dropped
        });
    }
    let count = |o| outcomes.iter().filter(|&&x| x == o).count();
    let regenerated_kept = count(QcOutcome::RegeneratedKept);
    let dropped = count(QcOutcome::Dropped);
    let ledger = QcLedger {
        threshold,
        input: scores.len(),
        kept: count(QcOutcome::Kept) + regenerated_kept,
        regenerated: regenerated_kept + dropped,
        regenerated_kept,
        dropped,
    };
    Ok(QcReport { outcomes, ledger })
}

/// Human-review rejection rate above which filters are recalibrated.
pub const RECALIBRATION_TRIGGER: f64 = 0.05;
/// Default share of records flagged for human review.
pub const AUDIT_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSample {
    pub population: usize,
    pub fraction: f64,
    /// Sorted record indices flagged for review.
    pub indices: Vec<usize>,
    pub recalibration_trigger: f64,
}

/// Uniform sample of ⌈fraction·n⌉ indices without replacement.
pub fn human_audit_sample(n: usize, fraction: f64, rng: &mut Rng) -> Result<AuditSample> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("audit.fraction", "must lie in (0, 1]"));
    }
    let k = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut indices = rng.sample_indices(n, k.min(n));
    indices.sort_unstable();
    Ok(AuditSample {
        population: n,
        fraction,
        indices,
        recalibration_trigger: RECALIBRATION_TRIGGER,
    })
}
