//! Network inputs and targets built from observations.
//!
//! Currency amounts enter the networks as `ln(1 + x)` and every continuous
//! input is then z-scored with statistics fitted on the training split.
//! Sequence channels are standardised per channel.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::Observation;
use crate::error::{Error, Result};
use crate::simulator::{TxnKind, AGE_BANDS, SEVERITY_LEVELS};

/// Model family and whether case-estimate information is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "FNN")]
    Fnn,
    #[serde(rename = "FNN+")]
    FnnPlus,
    #[serde(rename = "LSTM")]
    Lstm,
    #[serde(rename = "LSTM+")]
    LstmPlus,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Fnn,
        Variant::FnnPlus,
        Variant::Lstm,
        Variant::LstmPlus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Fnn => "FNN",
            Variant::FnnPlus => "FNN+",
            Variant::Lstm => "LSTM",
            Variant::LstmPlus => "LSTM+",
        }
    }

    pub fn is_recurrent(self) -> bool {
        matches!(self, Variant::Lstm | Variant::LstmPlus)
    }

    pub fn uses_case_estimates(self) -> bool {
        matches!(self, Variant::FnnPlus | Variant::LstmPlus)
    }

    /// Filesystem-friendly tag, e.g. `fnn_plus`.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::Fnn => "fnn",
            Variant::FnnPlus => "fnn_plus",
            Variant::Lstm => "lstm",
            Variant::LstmPlus => "lstm_plus",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "FNN" => Ok(Variant::Fnn),
            "FNN+" | "FNN_PLUS" => Ok(Variant::FnnPlus),
            "LSTM" => Ok(Variant::Lstm),
            "LSTM+" | "LSTM_PLUS" => Ok(Variant::LstmPlus),
            other => Err(Error::config(
                "variant",
                format!("unknown model variant `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaymentSummary {
    pub count: f64,
    pub mean: f64,
    pub cv: f64,
    pub max: f64,
}

/// Count, mean, coefficient of variation (sample sd over mean) and maximum.
/// An empty list gives zeros; a single payment has cv 0.
pub fn payment_summaries(amounts: &[f64]) -> PaymentSummary {
    let n = amounts.len();
    if n == 0 {
        return PaymentSummary {
            count: 0.0,
            mean: 0.0,
            cv: 0.0,
            max: 0.0,
        };
    }
    let mean = amounts.iter().sum::<f64>() / n as f64;
    let cv = if n > 1 && mean > 0.0 {
        let ss: f64 = amounts.iter().map(|a| (a - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt() / mean
    } else {
        0.0
    };
    PaymentSummary {
        count: n as f64,
        mean,
        cv,
        max: amounts.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseEstimateSummary {
    pub n_revisions: f64,
    pub largest_abs: f64,
    pub total_abs: f64,
    pub prop_upward: f64,
}

/// Summaries of the consecutive non-zero changes in a case-estimate path.
pub fn case_estimate_summaries(path: &[f64]) -> CaseEstimateSummary {
    let diffs: Vec<f64> = path
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return CaseEstimateSummary {
            n_revisions: 0.0,
            largest_abs: 0.0,
            total_abs: 0.0,
            prop_upward: 0.0,
        };
    }
    let n = diffs.len() as f64;
    CaseEstimateSummary {
        n_revisions: n,
        largest_abs: diffs.iter().map(|d| d.abs()).fold(0.0, f64::max),
        total_abs: diffs.iter().map(|d| d.abs()).sum(),
        prop_upward: diffs.iter().filter(|d| **d > 0.0).count() as f64 / n,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureOptions {
    /// Also feed the current case-estimate level to FNN+.
    pub include_current_ce: bool,
}

/// Raw (unstandardised) static inputs of one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticFeatures {
    pub prediction_quarter: f64,
    pub accident_quarter: f64,
    pub development_quarter: Option<f64>,
    pub payment: Option<PaymentSummary>,
    pub case_estimate: Option<CaseEstimateSummary>,
    pub current_case_estimate: Option<f64>,
    pub legal_rep: f64,
    pub severity_index: usize,
    pub age_index: usize,
}

impl StaticFeatures {
    /// Continuous inputs in network order; currency fields as `ln(1 + x)`.
    pub fn continuous(&self) -> Vec<f64> {
        let mut v = vec![self.prediction_quarter, self.accident_quarter];
        if let Some(d) = self.development_quarter {
            v.push(d);
        }
        if let Some(p) = &self.payment {
            v.extend([p.count, p.mean.ln_1p(), p.cv, p.max.ln_1p()]);
        }
        if let Some(c) = &self.case_estimate {
            v.extend([
                c.n_revisions,
                c.largest_abs.ln_1p(),
                c.total_abs.ln_1p(),
                c.prop_upward,
            ]);
        }
        if let Some(ce) = self.current_case_estimate {
            v.push(ce.ln_1p());
        }
        v.push(self.legal_rep);
        v
    }

    pub fn categories(&self) -> Vec<usize> {
        vec![self.severity_index, self.age_index]
    }
}

/// Embedding table sizes, each with one reserved row for unseen levels.
pub fn category_levels() -> Vec<usize> {
    vec![usize::from(SEVERITY_LEVELS) + 1, usize::from(AGE_BANDS) + 1]
}

/// Dense 0-based index for a 1-based category code; out-of-range codes map to
/// the reserved last row.
pub fn category_index(code: u8, levels: u8) -> usize {
    if (1..=levels).contains(&code) {
        usize::from(code - 1)
    } else {
        usize::from(levels)
    }
}

pub fn encode_static(
    obs: &Observation<'_>,
    variant: Variant,
    options: FeatureOptions,
) -> StaticFeatures {
    let cov = obs.claim.covariates;
    let mut features = StaticFeatures {
        prediction_quarter: obs.prediction_quarter as f64,
        accident_quarter: obs.accident_quarter as f64,
        development_quarter: None,
        payment: None,
        case_estimate: None,
        current_case_estimate: None,
        legal_rep: if cov.legal_rep { 1.0 } else { 0.0 },
        severity_index: category_index(cov.severity, SEVERITY_LEVELS),
        age_index: category_index(cov.age_band, AGE_BANDS),
    };
    if !variant.is_recurrent() {
        features.development_quarter = Some(obs.quarters_since_notification as f64);
        let payments: Vec<f64> = obs
            .history
            .iter()
            .filter(|e| e.kind == TxnKind::Payment)
            .map(|e| e.payment_amount)
            .collect();
        features.payment = Some(payment_summaries(&payments));
        if variant == Variant::FnnPlus {
            let path: Vec<f64> = obs.history.iter().map(|e| e.case_estimate_after).collect();
            features.case_estimate = Some(case_estimate_summaries(&path));
            if options.include_current_ce {
                features.current_case_estimate = Some(obs.case_estimate_now);
            }
        }
    }
    features
}

/// Per-transaction steps: calendar time, time since notification,
/// `ln(1 + cumulative paid)` and, for LSTM+, `ln(1 + case estimate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceFeatures {
    pub channels: usize,
    pub steps: Vec<Vec<f64>>,
}

impl SequenceFeatures {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

pub fn build_sequence(obs: &Observation<'_>, include_case_estimate: bool) -> SequenceFeatures {
    let t0 = obs.claim.notification_time;
    let mut paid = 0.0;
    let steps = obs
        .history
        .iter()
        .map(|e| {
            paid += e.payment_amount;
            let mut step = vec![e.time, e.time - t0, paid.ln_1p()];
            if include_case_estimate {
                step.push(e.case_estimate_after.ln_1p());
            }
            step
        })
        .collect();
    SequenceFeatures {
        channels: if include_case_estimate { 4 } else { 3 },
        steps,
    }
}

/// Mean and floored standard deviation of a feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub sd: f64,
}

pub const SD_FLOOR: f64 = 1e-12;

impl Moments {
    /// Population moments; a (near) constant feature gets sd 1.
    pub fn fit(values: impl Iterator<Item = f64> + Clone) -> Self {
        let (n, sum) = values
            .clone()
            .fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
        if n == 0 {
            return Moments { mean: 0.0, sd: 1.0 };
        }
        let mean = sum / n as f64;
        let var = values.map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        Moments {
            mean,
            sd: if sd > SD_FLOOR * mean.abs().max(1.0) {
                sd
            } else {
                1.0
            },
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.sd
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalisationStats {
    pub variant: Variant,
    pub options: FeatureOptions,
    pub statics: Vec<Moments>,
    pub sequence: Vec<Moments>,
    /// Moments of `ln(ultimate)`.
    pub target: Moments,
}

impl NormalisationStats {
    /// Fits every moment on the given (training) observations.
    pub fn fit(
        train: &[Observation<'_>],
        variant: Variant,
        options: FeatureOptions,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::config(
                "train",
                "cannot fit normalisation on an empty training set",
            ));
        }
        let statics: Vec<Vec<f64>> = train
            .iter()
            .map(|o| encode_static(o, variant, options).continuous())
            .collect();
        let width = statics[0].len();
        let static_moments = (0..width)
            .map(|j| Moments::fit(statics.iter().map(move |row| row[j])))
            .collect();
        let sequence = if variant.is_recurrent() {
            let seqs: Vec<SequenceFeatures> = train
                .iter()
                .map(|o| build_sequence(o, variant.uses_case_estimates()))
                .collect();
            let channels = seqs[0].channels;
            (0..channels)
                .map(|c| {
                    Moments::fit(
                        seqs.iter()
                            .flat_map(move |s| s.steps.iter().map(move |st| st[c])),
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        let target = Moments::fit(train.iter().map(|o| o.target_ultimate.ln()));
        Ok(NormalisationStats {
            variant,
            options,
            statics: static_moments,
            sequence,
            target,
        })
    }

    pub fn apply_static(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(&self.statics)
            .map(|(x, m)| m.apply(*x))
            .collect()
    }

    pub fn invert_static(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.statics)
            .map(|(x, m)| m.invert(*x))
            .collect()
    }

    pub fn apply_sequence(&self, seq: &SequenceFeatures) -> Vec<Vec<f64>> {
        seq.steps
            .iter()
            .map(|step| {
                step.iter()
                    .zip(&self.sequence)
                    .map(|(x, m)| m.apply(*x))
                    .collect()
            })
            .collect()
    }

    /// Normalised log target.
    pub fn make_target(&self, ultimate: f64) -> Result<f64> {
        make_target(ultimate, &self.target)
    }

    /// Normalised log prediction back to log dollars.
    pub fn to_log_dollars(&self, y: f64) -> f64 {
        self.target.invert(y)
    }

    pub fn encode(&self, obs: &Observation<'_>) -> Result<EncodedObservation> {
        let raw = encode_static(obs, self.variant, self.options);
        let sequence = if self.variant.is_recurrent() {
            self.apply_sequence(&build_sequence(obs, self.variant.uses_case_estimates()))
        } else {
            Vec::new()
        };
        Ok(EncodedObservation {
            statics: self.apply_static(&raw.continuous()),
            categories: raw.categories(),
            sequence,
            target: self.make_target(obs.target_ultimate)?,
        })
    }

    pub fn encode_all(&self, observations: &[Observation<'_>]) -> Result<Vec<EncodedObservation>> {
        observations.iter().map(|o| self.encode(o)).collect()
    }
}

pub fn make_target(ultimate: f64, target: &Moments) -> Result<f64> {
    if !(ultimate > 0.0) {
        return Err(Error::Domain(format!(
            "ultimate must be positive, got {ultimate}"
        )));
    }
    Ok(target.apply(ultimate.ln()))
}

/// Standardised inputs and target of one observation, ready for a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedObservation {
    pub statics: Vec<f64>,
    pub categories: Vec<usize>,
    /// Empty for feed-forward variants.
    pub sequence: Vec<Vec<f64>>,
    pub target: f64,
}
