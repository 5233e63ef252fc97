//! Per-quarter observations and train/validation/test splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::simulator::{ClaimRecord, TransactionEvent, TxnKind};

pub use crate::simulator::load_transactions;

/// One claim seen at the end of one calendar quarter.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub claim: &'a ClaimRecord,
    pub prediction_quarter: i64,
    pub accident_quarter: i64,
    pub quarters_since_notification: i64,
    pub paid_to_date: f64,
    pub case_estimate_now: f64,
    /// Events with time at or before the prediction quarter.
    pub history: &'a [TransactionEvent],
    pub target_ultimate: f64,
}

impl Observation<'_> {
    pub fn claim_id(&self) -> u64 {
        self.claim.claim_id
    }

    pub fn outstanding(&self) -> f64 {
        self.target_ultimate - self.paid_to_date
    }

    /// Builds the observation of `claim` at quarter `q`. Returns `None` when the
    /// claim is not open at the end of that quarter.
    pub fn at(claim: &ClaimRecord, q: i64) -> Option<Observation<'_>> {
        let (first, last) = prediction_quarters(claim.notification_time, claim.settlement_time);
        if q < first || q > last {
            return None;
        }
        let end = claim.events.partition_point(|e| e.time <= q as f64);
        let history = &claim.events[..end];
        let paid_to_date = history
            .iter()
            .filter(|e| e.kind == TxnKind::Payment)
            .fold(0.0, |acc, e| acc + e.payment_amount);
        let case_estimate_now = history.last().map_or(0.0, |e| e.case_estimate_after);
        Some(Observation {
            claim,
            prediction_quarter: q,
            accident_quarter: claim.accident_quarter(),
            quarters_since_notification: q - claim.notification_time.floor() as i64,
            paid_to_date,
            case_estimate_now,
            history,
            target_ultimate: claim.ultimate_size,
        })
    }
}

/// Inclusive range `floor(t1)+1 ..= floor(t2)` of prediction quarters for a
/// claim open on `(t1, t2)`. Empty when the claim opens and closes in one quarter.
pub fn prediction_quarters(notification: f64, settlement: f64) -> (i64, i64) {
    (notification.floor() as i64 + 1, settlement.floor() as i64)
}

/// Number of observations a claim yields, `floor(t2) - floor(t1)`.
pub fn observation_count(claim: &ClaimRecord) -> usize {
    let (first, last) = prediction_quarters(claim.notification_time, claim.settlement_time);
    (last - first + 1).max(0) as usize
}

/// Duplicates each claim once per prediction quarter it is open at.
pub fn build_observations(portfolio: &[ClaimRecord]) -> Vec<Observation<'_>> {
    let mut out = Vec::new();
    for claim in portfolio {
        let (first, last) = prediction_quarters(claim.notification_time, claim.settlement_time);
        out.extend((first..=last).filter_map(|q| Observation::at(claim, q)));
    }
    out
}

/// Observations made exactly at the valuation quarter.
pub fn valuation_slice<'a>(
    observations: &[Observation<'a>],
    valuation_quarter: i64,
) -> Vec<Observation<'a>> {
    observations
        .iter()
        .filter(|o| o.prediction_quarter == valuation_quarter)
        .copied()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Finalisation,
    Naive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitBoundaries {
    pub train_cutoff: f64,
    pub valuation: f64,
}

impl SplitBoundaries {
    pub const PAPER: SplitBoundaries = SplitBoundaries {
        train_cutoff: 36.0,
        valuation: 40.0,
    };

    /// Valuation at the final accident quarter, validation band the four
    /// quarters before it.
    pub fn for_quarters(n_accident_quarters: u32) -> Self {
        let valuation = f64::from(n_accident_quarters);
        SplitBoundaries {
            train_cutoff: valuation - 4.0,
            valuation,
        }
    }

    pub fn valuation_quarter(&self) -> i64 {
        self.valuation.floor() as i64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub labels: BTreeMap<u64, Split>,
    pub mode: SplitMode,
    pub boundaries: SplitBoundaries,
    pub move_fraction: f64,
    /// Validation claims moved into training (finalisation mode only).
    pub moved: BTreeSet<u64>,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn label(&self, claim_id: u64) -> Option<Split> {
        self.labels.get(&claim_id).copied()
    }

    pub fn select<'a>(
        &self,
        observations: &[Observation<'a>],
        split: Split,
    ) -> Vec<Observation<'a>> {
        observations
            .iter()
            .filter(|o| self.label(o.claim_id()) == Some(split))
            .copied()
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.labels.values().filter(|s| **s == split).count()
    }

    /// Writes the `(claim_id, split)` audit manifest.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record(["claim_id", "split"])?;
        for (id, split) in &self.labels {
            let name = match split {
                Split::Train => "train",
                Split::Validation => "validation",
                Split::Test => "test",
            };
            w.write_record([id.to_string().as_str(), name])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_manifest(path: &Path) -> Result<BTreeMap<u64, Split>> {
        #[derive(Deserialize)]
        struct Row {
            claim_id: u64,
            split: Split,
        }
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(BufReader::new(file));
        let mut labels = BTreeMap::new();
        for (i, row) in r.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::Parse {
                line: i as u64 + 2,
                message: e.to_string(),
            })?;
            labels.insert(row.claim_id, row.split);
        }
        Ok(labels)
    }
}

/// Splits claims by finalisation time: settled before `train_cutoff` go to
/// training, in `[train_cutoff, valuation)` to validation, the rest to test.
/// A uniformly random `move_fraction` of validation claims then moves to
/// training.
pub fn assign_splits(
    portfolio: &[ClaimRecord],
    boundaries: SplitBoundaries,
    move_fraction: f64,
    seed: u64,
) -> Result<SplitAssignment> {
    if !(boundaries.train_cutoff <= boundaries.valuation) {
        return Err(Error::config(
            "boundaries",
            "train_cutoff must not exceed valuation",
        ));
    }
    if !(0.0..1.0).contains(&move_fraction) {
        return Err(Error::config("move_fraction", "must lie in [0, 1)"));
    }
    let mut labels = BTreeMap::new();
    let mut validation = Vec::new();
    for claim in portfolio {
        let t = claim.settlement_time;
        let split = if t < boundaries.train_cutoff {
            Split::Train
        } else if t < boundaries.valuation {
            validation.push(claim.claim_id);
            Split::Validation
        } else {
            Split::Test
        };
        labels.insert(claim.claim_id, split);
    }
    validation.sort_unstable();
    let n_move = (move_fraction * validation.len() as f64).round() as usize;
    let mut rng = rng::stream(seed, 0);
    validation.shuffle(&mut rng);
    let moved: BTreeSet<u64> = validation[..n_move].iter().copied().collect();
    for id in &moved {
        labels.insert(*id, Split::Train);
    }
    Ok(SplitAssignment {
        labels,
        mode: SplitMode::Finalisation,
        boundaries,
        move_fraction,
        moved,
        seed,
    })
}

/// Largest-remainder allocation of `n` items to the given fractions.
pub fn largest_remainder(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, q) in sizes.iter_mut().zip(&quotas) {
        *s = q.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    // larger remainder first, earlier split on ties
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n - sizes.iter().sum::<usize>();
    for idx in order {
        if left == 0 {
            break;
        }
        sizes[idx] += 1;
        left -= 1;
    }
    sizes
}

/// Random split by claim id into train/validation/test fractions.
pub fn assign_splits_naive(
    portfolio: &[ClaimRecord],
    fractions: [f64; 3],
    boundaries: SplitBoundaries,
    seed: u64,
) -> Result<SplitAssignment> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::config(
            "fractions",
            "must be non-negative and sum to 1",
        ));
    }
    let mut ids: Vec<u64> = portfolio.iter().map(|c| c.claim_id).collect();
    ids.sort_unstable();
    let sizes = largest_remainder(ids.len(), fractions);
    let mut rng = rng::stream(seed, 1);
    ids.shuffle(&mut rng);
    let mut labels = BTreeMap::new();
    for (i, id) in ids.into_iter().enumerate() {
        let split = if i < sizes[0] {
            Split::Train
        } else if i < sizes[0] + sizes[1] {
            Split::Validation
        } else {
            Split::Test
        };
        labels.insert(id, split);
    }
    Ok(SplitAssignment {
        labels,
        mode: SplitMode::Naive,
        boundaries,
        move_fraction: 0.0,
        moved: BTreeSet::new(),
        seed,
    })
}
