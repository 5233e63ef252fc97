//! Synthetic claim portfolios with continuous-time payments and case-estimate
//! revisions.
//!
//! Generation runs in module order: claim counts per accident quarter, then per
//! claim the occurrence time, base size, notification and settlement dates,
//! payment count/timing/amounts, and finally revision counts, timings and
//! sizes. Each claim draws from its own random stream, so a portfolio is a pure
//! function of the configuration and can be generated in parallel.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, LabRng};

/// Smallest gap between notification and settlement, in quarters.
pub const MIN_SETTLEMENT_GAP: f64 = 0.01;
pub const SEVERITY_LEVELS: u8 = 6;
pub const AGE_BANDS: u8 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogNormalSpec {
    pub log_mean: f64,
    pub log_sd: f64,
}

/// Lognormal delay whose mean scales as `(size / median size)^size_elasticity`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelaySpec {
    /// Mean delay in quarters for a claim of median size.
    pub mean: f64,
    pub cv: f64,
    pub size_elasticity: f64,
}

/// Number of payments is `1 + Poisson(extra_mean * (size / median)^size_elasticity)`.
/// Payment shares are Dirichlet with the given concentration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaymentCountSpec {
    pub extra_mean: f64,
    pub size_elasticity: f64,
    pub share_concentration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InflationBand {
    /// Exclusive upper bound on base claim size; `None` for the last band.
    pub upper_bound: Option<f64>,
    /// Superimposed inflation per calendar quarter, applied at payment time.
    pub calendar_rate: f64,
    /// Superimposed inflation per quarter of occurrence.
    pub occurrence_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InflationSpec {
    pub bands: Vec<InflationBand>,
}

impl InflationSpec {
    pub fn none() -> Self {
        Self::flat(0.0, 0.0)
    }

    pub fn flat(calendar_rate: f64, occurrence_rate: f64) -> Self {
        InflationSpec {
            bands: vec![InflationBand {
                upper_bound: None,
                calendar_rate,
                occurrence_rate,
            }],
        }
    }

    pub fn band_for(&self, size: f64) -> &InflationBand {
        self.bands
            .iter()
            .find(|b| b.upper_bound.is_none_or(|u| size < u))
            .unwrap_or_else(|| self.bands.last().expect("validated nonempty"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevisionSpec {
    /// Expected number of major revisions per claim.
    pub major_mean_count: f64,
    /// Expected number of minor revisions per quarter the claim is open.
    pub minor_rate_per_quarter: f64,
    /// Standard deviation of the log-scale jump of a major revision.
    pub major_log_sd: f64,
    /// Standard deviation of the log-scale jump of a minor revision.
    pub minor_log_sd: f64,
    /// Probability that a revision lands on the time of an interim payment.
    pub concurrent_with_payment_prob: f64,
    /// Mean exponential delay from notification to each major revision, in
    /// quarters; 0 spreads major revisions uniformly over the open period.
    pub major_delay_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub n_accident_quarters: u32,
    pub expected_claims_per_quarter: f64,
    pub claim_size_distribution: LogNormalSpec,
    pub notification_delay_spec: DelaySpec,
    pub settlement_delay_spec: DelaySpec,
    pub payment_count_spec: PaymentCountSpec,
    pub inflation_spec: InflationSpec,
    pub revision_spec: RevisionSpec,
    /// Multiplicative error of the first case estimate, as a lognormal.
    pub initial_estimate_error: LogNormalSpec,
    pub seed: u64,
}

impl SimulationConfig {
    /// 40 accident quarters at about 750 claims per quarter.
    pub fn paper_scale() -> Self {
        SimulationConfig {
            n_accident_quarters: 40,
            expected_claims_per_quarter: 750.0,
            claim_size_distribution: LogNormalSpec {
                log_mean: 9.5,
                log_sd: 1.4,
            },
            notification_delay_spec: DelaySpec {
                mean: 0.8,
                cv: 1.0,
                size_elasticity: 0.1,
            },
            settlement_delay_spec: DelaySpec {
                mean: 10.0,
                cv: 0.7,
                size_elasticity: 0.25,
            },
            payment_count_spec: PaymentCountSpec {
                extra_mean: 2.5,
                size_elasticity: 0.15,
                share_concentration: 2.0,
            },
            inflation_spec: InflationSpec {
                bands: vec![
                    InflationBand {
                        upper_bound: Some(20_000.0),
                        calendar_rate: 0.005,
                        occurrence_rate: 0.0,
                    },
                    InflationBand {
                        upper_bound: None,
                        calendar_rate: 0.015,
                        occurrence_rate: -0.005,
                    },
                ],
            },
            revision_spec: RevisionSpec {
                major_mean_count: 1.0,
                minor_rate_per_quarter: 0.3,
                major_log_sd: 0.2,
                minor_log_sd: 0.05,
                concurrent_with_payment_prob: 0.3,
                major_delay_mean: 1.0,
            },
            initial_estimate_error: LogNormalSpec {
                log_mean: -0.4,
                log_sd: 0.3,
            },
            seed: 1,
        }
    }

    /// 20 accident quarters at about 150 claims per quarter (~3,000 claims).
    pub fn desk_scale() -> Self {
        SimulationConfig {
            n_accident_quarters: 20,
            expected_claims_per_quarter: 150.0,
            ..Self::paper_scale()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: SimulationConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_accident_quarters < 1 {
            return Err(Error::config("n_accident_quarters", "must be at least 1"));
        }
        nonneg(
            "expected_claims_per_quarter",
            self.expected_claims_per_quarter,
        )?;
        finite(
            "claim_size_distribution.log_mean",
            self.claim_size_distribution.log_mean,
        )?;
        nonneg(
            "claim_size_distribution.log_sd",
            self.claim_size_distribution.log_sd,
        )?;
        for (name, d) in [
            ("notification_delay_spec", &self.notification_delay_spec),
            ("settlement_delay_spec", &self.settlement_delay_spec),
        ] {
            nonneg(&format!("{name}.mean"), d.mean)?;
            nonneg(&format!("{name}.cv"), d.cv)?;
            finite(&format!("{name}.size_elasticity"), d.size_elasticity)?;
        }
        let p = &self.payment_count_spec;
        nonneg("payment_count_spec.extra_mean", p.extra_mean)?;
        finite("payment_count_spec.size_elasticity", p.size_elasticity)?;
        positive(
            "payment_count_spec.share_concentration",
            p.share_concentration,
        )?;

        let bands = &self.inflation_spec.bands;
        if bands.is_empty() {
            return Err(Error::config(
                "inflation_spec.bands",
                "at least one band required",
            ));
        }
        let mut previous = 0.0;
        for (i, band) in bands.iter().enumerate() {
            let last = i + 1 == bands.len();
            match (band.upper_bound, last) {
                (None, true) => {}
                (None, false) => {
                    return Err(Error::config(
                        format!("inflation_spec.bands[{i}].upper_bound"),
                        "only the last band may be unbounded",
                    ))
                }
                (Some(_), true) => {
                    return Err(Error::config(
                        format!("inflation_spec.bands[{i}].upper_bound"),
                        "last band must be unbounded so bands cover all sizes",
                    ))
                }
                (Some(u), false) => {
                    if !(u.is_finite() && u > previous) {
                        return Err(Error::config(
                            format!("inflation_spec.bands[{i}].upper_bound"),
                            "upper bounds must be positive and strictly increasing",
                        ));
                    }
                    previous = u;
                }
            }
            if !(band.calendar_rate > -1.0 && band.calendar_rate.is_finite()) {
                return Err(Error::config(
                    format!("inflation_spec.bands[{i}].calendar_rate"),
                    "must be finite and greater than -1",
                ));
            }
            if !(band.occurrence_rate > -1.0 && band.occurrence_rate.is_finite()) {
                return Err(Error::config(
                    format!("inflation_spec.bands[{i}].occurrence_rate"),
                    "must be finite and greater than -1",
                ));
            }
        }

        let r = &self.revision_spec;
        nonneg("revision_spec.major_mean_count", r.major_mean_count)?;
        nonneg(
            "revision_spec.minor_rate_per_quarter",
            r.minor_rate_per_quarter,
        )?;
        nonneg("revision_spec.major_log_sd", r.major_log_sd)?;
        nonneg("revision_spec.minor_log_sd", r.minor_log_sd)?;
        nonneg("revision_spec.major_delay_mean", r.major_delay_mean)?;
        if !(0.0..=1.0).contains(&r.concurrent_with_payment_prob) {
            return Err(Error::config(
                "revision_spec.concurrent_with_payment_prob",
                "must lie in [0, 1]",
            ));
        }
        finite(
            "initial_estimate_error.log_mean",
            self.initial_estimate_error.log_mean,
        )?;
        nonneg(
            "initial_estimate_error.log_sd",
            self.initial_estimate_error.log_sd,
        )?;
        Ok(())
    }

    pub fn median_size(&self) -> f64 {
        self.claim_size_distribution.log_mean.exp()
    }
}

fn finite(field: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, "must be finite"))
    }
}

fn nonneg(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::config(field, "must be finite and non-negative"))
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(field, "must be finite and strictly positive"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TxnKind {
    #[serde(rename = "P")]
    Payment,
    #[serde(rename = "MAJ")]
    MajorRevision,
    #[serde(rename = "MIN")]
    MinorRevision,
}

impl TxnKind {
    pub fn code(self) -> &'static str {
        match self {
            TxnKind::Payment => "P",
            TxnKind::MajorRevision => "MAJ",
            TxnKind::MinorRevision => "MIN",
        }
    }

    pub fn is_revision(self) -> bool {
        !matches!(self, TxnKind::Payment)
    }

    /// Tie-break for simultaneous events: payments first.
    fn order(self) -> u8 {
        match self {
            TxnKind::Payment => 0,
            TxnKind::MajorRevision => 1,
            TxnKind::MinorRevision => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransactionEvent {
    pub claim_id: u64,
    /// Calendar time in quarters.
    pub time: f64,
    pub kind: TxnKind,
    pub payment_amount: f64,
    /// Total incurred estimate in force after the event.
    pub case_estimate_after: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Covariates {
    /// 1..=6
    pub severity: u8,
    /// 10-year age band index, 1..=8 (10-19 through 80-89).
    pub age_band: u8,
    pub legal_rep: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClaimRecord {
    pub claim_id: u64,
    pub occurrence_time: f64,
    pub notification_time: f64,
    pub settlement_time: f64,
    /// Sum of the claim's payments, in payment order.
    pub ultimate_size: f64,
    pub covariates: Covariates,
    /// Ordered by time; payments precede revisions at equal times.
    pub events: Vec<TransactionEvent>,
}

impl ClaimRecord {
    /// Calendar quarter of occurrence, 1-based.
    pub fn accident_quarter(&self) -> i64 {
        self.occurrence_time.floor() as i64 + 1
    }

    pub fn payments(&self) -> impl Iterator<Item = &TransactionEvent> {
        self.events.iter().filter(|e| e.kind == TxnKind::Payment)
    }

    pub fn transaction_count(&self) -> usize {
        self.events.len()
    }

    /// Checks the lifecycle, conservation and convergence invariants.
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::DataIntegrity {
            claim_id: self.claim_id,
            message,
        };
        if !(self.occurrence_time <= self.notification_time
            && self.notification_time < self.settlement_time)
        {
            return Err(fail(format!(
                "lifecycle out of order: occurrence {}, notification {}, settlement {}",
                self.occurrence_time, self.notification_time, self.settlement_time
            )));
        }
        if self.events.is_empty() {
            return Err(fail("claim has no transactions".into()));
        }
        if self.payments().next().is_none() {
            return Err(fail("claim has no payments".into()));
        }
        let mut paid = 0.0;
        let mut last_time = f64::NEG_INFINITY;
        for e in &self.events {
            if e.claim_id != self.claim_id {
                return Err(fail(format!("event tagged with claim {}", e.claim_id)));
            }
            if e.time < last_time {
                return Err(fail(format!("event at {} precedes {}", e.time, last_time)));
            }
            last_time = e.time;
            if e.time < self.notification_time || e.time > self.settlement_time {
                return Err(fail(format!("event at {} outside the open period", e.time)));
            }
            if !(e.payment_amount >= 0.0) {
                return Err(fail(format!("negative payment {}", e.payment_amount)));
            }
            if e.kind.is_revision() && e.payment_amount != 0.0 {
                return Err(fail("revision event carries a payment".into()));
            }
            paid += e.payment_amount;
            if e.case_estimate_after < paid {
                return Err(fail(format!(
                    "case estimate {} below paid to date {paid}",
                    e.case_estimate_after
                )));
            }
        }
        if paid != self.ultimate_size {
            return Err(fail(format!(
                "payments sum to {paid}, ultimate is {}",
                self.ultimate_size
            )));
        }
        if !(self.ultimate_size > 0.0) {
            return Err(fail("ultimate size must be positive".into()));
        }
        let last = self.events.last().expect("nonempty");
        if last.case_estimate_after != self.ultimate_size {
            return Err(fail(format!(
                "final case estimate {} differs from ultimate {}",
                last.case_estimate_after, self.ultimate_size
            )));
        }
        Ok(())
    }
}

pub type Portfolio = Vec<ClaimRecord>;

/// Lifecycle of one claim before payments are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClaimLifecycle {
    pub occurrence_time: f64,
    /// Claim size before superimposed inflation.
    pub base_size: f64,
    pub notification_time: f64,
    pub settlement_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Payment {
    pub time: f64,
    pub amount: f64,
}

fn normal(rng: &mut LabRng) -> f64 {
    StandardNormal.sample(rng)
}

fn lognormal_delay(spec: &DelaySpec, size_ratio: f64, rng: &mut LabRng) -> f64 {
    // always consume the draw so streams stay aligned across configs
    let z = normal(rng);
    let mean = spec.mean * size_ratio.powf(spec.size_elasticity);
    if mean <= 0.0 {
        return 0.0;
    }
    let sigma2 = (1.0 + spec.cv * spec.cv).ln();
    (mean.ln() - 0.5 * sigma2 + sigma2.sqrt() * z).exp()
}

fn poisson(mean: f64, rng: &mut LabRng) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean)
        .map(|p| p.sample(rng) as u64)
        .unwrap_or(0)
}

/// Occurrence time, base size and the notification/settlement dates of a claim
/// from accident quarter `accident_quarter` (1-based).
pub fn simulate_claim_lifecycle(
    config: &SimulationConfig,
    accident_quarter: u32,
    rng: &mut LabRng,
) -> ClaimLifecycle {
    let occurrence_time = f64::from(accident_quarter - 1) + rng.random::<f64>();
    let size_spec = &config.claim_size_distribution;
    let base_size = (size_spec.log_mean + size_spec.log_sd * normal(rng)).exp();
    let ratio = base_size / config.median_size();
    let notification_time =
        occurrence_time + lognormal_delay(&config.notification_delay_spec, ratio, rng);
    let delay = lognormal_delay(&config.settlement_delay_spec, ratio, rng);
    let settlement_time = notification_time + delay.max(MIN_SETTLEMENT_GAP);
    ClaimLifecycle {
        occurrence_time,
        base_size,
        notification_time,
        settlement_time,
    }
}

/// Splits nominal amounts into whole cents. The final payment absorbs the
/// rounding residue so the cents add up to the rounded total.
pub fn allocate_cents(nominal: &[f64]) -> Vec<f64> {
    if nominal.is_empty() {
        return Vec::new();
    }
    let total: f64 = nominal.iter().sum();
    let total_cents = ((total * 100.0).round() as i64).max(nominal.len() as i64);
    let mut cents: Vec<i64> = nominal[..nominal.len() - 1]
        .iter()
        .map(|x| ((x * 100.0).round() as i64).max(1))
        .collect();
    let used: i64 = cents.iter().sum();
    let mut last = total_cents - used;
    if last < 1 {
        // shave the largest interim payments until the final one is positive
        let mut deficit = 1 - last;
        while deficit > 0 {
            let (idx, _) = cents
                .iter()
                .enumerate()
                .max_by_key(|(_, c)| **c)
                .expect("deficit implies interim payments");
            let take = deficit.min(cents[idx] - 1);
            cents[idx] -= take;
            deficit -= take;
        }
        last = 1;
    }
    cents.push(last);
    cents.into_iter().map(|c| c as f64 / 100.0).collect()
}

/// Payments in time order. The last payment falls on the settlement date;
/// interim payments are uniform on the open period. Amounts carry calendar
/// and occurrence-period superimposed inflation for the claim's size band.
pub fn simulate_payments(
    lifecycle: &ClaimLifecycle,
    config: &SimulationConfig,
    rng: &mut LabRng,
) -> Vec<Payment> {
    let spec = &config.payment_count_spec;
    let ratio = lifecycle.base_size / config.median_size();
    let extra = poisson(spec.extra_mean * ratio.powf(spec.size_elasticity), rng).min(200) as usize;
    let n = 1 + extra;
    let t1 = lifecycle.notification_time;
    let t2 = lifecycle.settlement_time;
    let mut times: Vec<f64> = (0..extra)
        .map(|_| {
            let t = t1 + rng.random::<f64>() * (t2 - t1);
            if t > t1 {
                t
            } else {
                t1 + 0.5 * (t2 - t1)
            }
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times.push(t2);

    let gamma = Gamma::new(spec.share_concentration, 1.0).expect("validated concentration");
    let mut shares: Vec<f64> = (0..n).map(|_| gamma.sample(rng).max(1e-12)).collect();
    let share_total: f64 = shares.iter().sum();
    shares.iter_mut().for_each(|s| *s /= share_total);

    let band = config.inflation_spec.band_for(lifecycle.base_size);
    let occurrence_factor = (1.0 + band.occurrence_rate).powf(lifecycle.occurrence_time);
    let nominal: Vec<f64> = shares
        .iter()
        .zip(&times)
        .map(|(share, t)| {
            lifecycle.base_size * share * occurrence_factor * (1.0 + band.calendar_rate).powf(*t)
        })
        .collect();
    allocate_cents(&nominal)
        .into_iter()
        .zip(times)
        .map(|(amount, time)| Payment { time, amount })
        .collect()
}

fn ordered(events: &mut [TransactionEvent]) {
    events.sort_by(|a, b| {
        a.time
            .total_cmp(&b.time)
            .then(a.kind.order().cmp(&b.kind.order()))
    });
}

/// Builds the claim's full event list: the payments plus the initial case
/// estimate at notification and the major/minor revisions.
///
/// The initial estimate is `ultimate * error` and is recorded as a major
/// revision at the notification time. Revision counts are drawn first, then
/// their times, then their sizes. Major revisions follow notification after an
/// exponential delay, redrawn uniformly over the open period when the delay
/// overruns settlement. On the log scale the estimate error shrinks
/// linearly in the number of remaining revisions plus a kind-dependent jump,
/// and the last revision lands exactly on the ultimate. Estimates are never
/// allowed below paid to date, and the settlement payment closes the claim at
/// the ultimate.
pub fn simulate_revisions(
    claim_id: u64,
    lifecycle: &ClaimLifecycle,
    payments: &[Payment],
    config: &SimulationConfig,
    rng: &mut LabRng,
) -> Vec<TransactionEvent> {
    let ultimate = fold_sum(payments.iter().map(|p| p.amount));
    let spec = &config.revision_spec;
    let t1 = lifecycle.notification_time;
    let t2 = lifecycle.settlement_time;

    let n_major = poisson(spec.major_mean_count, rng) as usize;
    let n_minor = poisson(spec.minor_rate_per_quarter * (t2 - t1), rng) as usize;
    let total = n_major + n_minor;

    let interim: Vec<f64> = payments[..payments.len() - 1]
        .iter()
        .map(|p| p.time)
        .collect();
    let inside = |t: f64| {
        if t > t1 && t < t2 {
            t
        } else {
            t1 + 0.5 * (t2 - t1)
        }
    };
    let mut timed: Vec<(f64, TxnKind)> = Vec::with_capacity(total);
    for k in 0..total {
        let kind = if k < n_major {
            TxnKind::MajorRevision
        } else {
            TxnKind::MinorRevision
        };
        let concurrent = rng.random::<f64>() < spec.concurrent_with_payment_prob;
        let u = rng.random::<f64>();
        let time = if kind == TxnKind::MajorRevision && spec.major_delay_mean > 0.0 {
            let t = t1 - spec.major_delay_mean * (1.0 - u).ln();
            if t < t2 {
                t
            } else {
                inside(t1 + rng.random::<f64>() * (t2 - t1))
            }
        } else if concurrent && !interim.is_empty() {
            interim[((u * interim.len() as f64) as usize).min(interim.len() - 1)]
        } else {
            inside(t1 + u * (t2 - t1))
        };
        timed.push((time, kind));
    }
    timed.sort_by(|a, b| a.0.total_cmp(&b.0));

    let err = &config.initial_estimate_error;
    let mut log_error = err.log_mean + err.log_sd * normal(rng);
    let mut revisions = Vec::with_capacity(total + 1);
    revisions.push((t1, TxnKind::MajorRevision, ultimate * log_error.exp()));
    for (k, (time, kind)) in timed.into_iter().enumerate() {
        let remaining = (total - k - 1) as f64;
        let sd = match kind {
            TxnKind::MajorRevision => spec.major_log_sd,
            _ => spec.minor_log_sd,
        };
        let z = normal(rng);
        let target = if remaining == 0.0 {
            log_error = 0.0;
            ultimate
        } else {
            log_error = log_error * remaining / (remaining + 1.0) + sd * z;
            ultimate * log_error.exp()
        };
        revisions.push((time, kind, target));
    }

    let mut events: Vec<TransactionEvent> = payments
        .iter()
        .map(|p| TransactionEvent {
            claim_id,
            time: p.time,
            kind: TxnKind::Payment,
            payment_amount: p.amount,
            case_estimate_after: 0.0,
        })
        .chain(
            revisions
                .iter()
                .map(|&(time, kind, level)| TransactionEvent {
                    claim_id,
                    time,
                    kind,
                    payment_amount: 0.0,
                    // level stashed until the timeline walk below
                    case_estimate_after: level,
                }),
        )
        .collect();
    ordered(&mut events);

    let mut paid = 0.0;
    let mut estimate = 0.0;
    let last = events.len() - 1;
    for (i, e) in events.iter_mut().enumerate() {
        if e.kind.is_revision() {
            estimate = e.case_estimate_after;
        } else {
            paid += e.payment_amount;
        }
        e.case_estimate_after = if i == last {
            ultimate
        } else {
            estimate.max(paid)
        };
    }
    events
}

fn fold_sum(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, |acc, x| acc + x)
}

fn assign_covariates(config: &SimulationConfig, base_size: f64, rng: &mut LabRng) -> Covariates {
    let spec = &config.claim_size_distribution;
    let z = if spec.log_sd > 0.0 {
        (base_size.ln() - spec.log_mean) / spec.log_sd
    } else {
        0.0
    };
    let severity = (3.5 + 1.2 * z + 0.7 * normal(rng))
        .round()
        .clamp(1.0, f64::from(SEVERITY_LEVELS)) as u8;
    let age = (40.0 + 15.0 * normal(rng)).clamp(18.0, 89.0);
    let age_band = ((age / 10.0).floor() as u8).clamp(1, AGE_BANDS);
    let p_legal = 1.0 / (1.0 + (-(-1.0 + 1.2 * z)).exp());
    let legal_rep = rng.random::<f64>() < p_legal;
    Covariates {
        severity,
        age_band,
        legal_rep,
    }
}

/// Simulates one claim from its own random stream.
pub fn simulate_claim(
    config: &SimulationConfig,
    claim_id: u64,
    accident_quarter: u32,
    rng: &mut LabRng,
) -> ClaimRecord {
    let lifecycle = simulate_claim_lifecycle(config, accident_quarter, rng);
    let covariates = assign_covariates(config, lifecycle.base_size, rng);
    let payments = simulate_payments(&lifecycle, config, rng);
    let events = simulate_revisions(claim_id, &lifecycle, &payments, config, rng);
    let ultimate_size = fold_sum(events.iter().map(|e| e.payment_amount));
    ClaimRecord {
        claim_id,
        occurrence_time: lifecycle.occurrence_time,
        notification_time: lifecycle.notification_time,
        settlement_time: lifecycle.settlement_time,
        ultimate_size,
        covariates,
        events,
    }
}

/// Simulates a whole portfolio. Claim ids are 1-based in accident-quarter
/// order; claim `id` draws from stream `id` of the configured seed.
pub fn simulate_portfolio(config: &SimulationConfig) -> Result<Portfolio> {
    config.validate()?;
    let mut counts_rng = rng::stream(config.seed, 0);
    let mut jobs = Vec::new();
    let mut next_id = 1u64;
    for quarter in 1..=config.n_accident_quarters {
        let n = poisson(config.expected_claims_per_quarter, &mut counts_rng);
        for _ in 0..n {
            jobs.push((next_id, quarter));
            next_id += 1;
        }
    }
    Ok(jobs
        .into_par_iter()
        .map(|(id, quarter)| {
            let mut rng = rng::stream(config.seed, id);
            simulate_claim(config, id, quarter, &mut rng)
        })
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct TransactionRow {
    claim_id: u64,
    occurrence_time: f64,
    notification_time: f64,
    settlement_time: f64,
    severity: u8,
    age_band: u8,
    legal_rep: u8,
    txn_time: f64,
    txn_kind: TxnKind,
    payment_amount: f64,
    case_estimate_after: f64,
}

pub const TRANSACTION_HEADER: [&str; 11] = [
    "claim_id",
    "occurrence_time",
    "notification_time",
    "settlement_time",
    "severity",
    "age_band",
    "legal_rep",
    "txn_time",
    "txn_kind",
    "payment_amount",
    "case_estimate_after",
];

/// Writes one row per transaction, ordered by claim id then time.
pub fn write_transactions(portfolio: &[ClaimRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(file));
    writer.write_record(TRANSACTION_HEADER)?;
    let mut claims: Vec<&ClaimRecord> = portfolio.iter().collect();
    claims.sort_by_key(|c| c.claim_id);
    for claim in claims {
        for e in &claim.events {
            writer.serialize(TransactionRow {
                claim_id: claim.claim_id,
                occurrence_time: claim.occurrence_time,
                notification_time: claim.notification_time,
                settlement_time: claim.settlement_time,
                severity: claim.covariates.severity,
                age_band: claim.covariates.age_band,
                legal_rep: u8::from(claim.covariates.legal_rep),
                txn_time: e.time,
                txn_kind: e.kind,
                payment_amount: e.payment_amount,
                case_estimate_after: e.case_estimate_after,
            })?;
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a transaction file back into claims, re-sorting events and
/// re-checking every claim invariant.
pub fn load_transactions(path: &Path) -> Result<Portfolio> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader.headers()?.clone();
    if headers.iter().ne(TRANSACTION_HEADER.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected header {:?}", headers.iter().collect::<Vec<_>>()),
        });
    }
    let mut claims: std::collections::BTreeMap<u64, ClaimRecord> = Default::default();
    for (i, row) in reader.deserialize::<TransactionRow>().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(line, |p| p.line()),
            message: e.to_string(),
        })?;
        if row.legal_rep > 1 {
            return Err(Error::Parse {
                line,
                message: format!("legal_rep must be 0 or 1, got {}", row.legal_rep),
            });
        }
        if !(row.payment_amount >= 0.0) {
            return Err(Error::DataIntegrity {
                claim_id: row.claim_id,
                message: format!("negative payment {} at line {line}", row.payment_amount),
            });
        }
        let covariates = Covariates {
            severity: row.severity,
            age_band: row.age_band,
            legal_rep: row.legal_rep == 1,
        };
        let claim = claims.entry(row.claim_id).or_insert_with(|| ClaimRecord {
            claim_id: row.claim_id,
            occurrence_time: row.occurrence_time,
            notification_time: row.notification_time,
            settlement_time: row.settlement_time,
            ultimate_size: 0.0,
            covariates,
            events: Vec::new(),
        });
        if claim.occurrence_time != row.occurrence_time
            || claim.notification_time != row.notification_time
            || claim.settlement_time != row.settlement_time
            || claim.covariates != covariates
        {
            return Err(Error::DataIntegrity {
                claim_id: row.claim_id,
                message: format!("claim fields change at line {line}"),
            });
        }
        claim.events.push(TransactionEvent {
            claim_id: row.claim_id,
            time: row.txn_time,
            kind: row.txn_kind,
            payment_amount: row.payment_amount,
            case_estimate_after: row.case_estimate_after,
        });
    }
    let mut portfolio = Vec::with_capacity(claims.len());
    for (_, mut claim) in claims {
        // stable: keeps file order among identical (time, kind) pairs
        ordered(&mut claim.events);
        claim.ultimate_size = fold_sum(claim.events.iter().map(|e| e.payment_amount));
        claim.validate()?;
        portfolio.push(claim);
    }
    Ok(portfolio)
}
