//! Individual and aggregate reserve metrics, breakdown tables and the
//! cross-dataset summary.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Observation;
use crate::error::{Error, Result};

/// Label used for the raw case estimates treated as a model.
pub const CASE_ESTIMATES: &str = "CE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub claim_id: u64,
    pub prediction_quarter: i64,
    pub accident_quarter: i64,
    pub quarters_since_notification: i64,
    /// Dollar-scale prediction of the ultimate, `Ŷ`.
    pub predicted: f64,
    /// Paid to date, `P`.
    pub paid: f64,
    /// Actual ultimate, `Y`.
    pub actual: f64,
    /// Case estimate in force, `Ỹ`.
    pub case_estimate: f64,
}

impl PredictionRow {
    pub fn from_observation(obs: &Observation<'_>, predicted: f64) -> Self {
        PredictionRow {
            claim_id: obs.claim_id(),
            prediction_quarter: obs.prediction_quarter,
            accident_quarter: obs.accident_quarter,
            quarters_since_notification: obs.quarters_since_notification,
            predicted,
            paid: obs.paid_to_date,
            actual: obs.target_ultimate,
            case_estimate: obs.case_estimate_now,
        }
    }

    pub fn predicted_outstanding(&self) -> f64 {
        self.predicted - self.paid
    }

    pub fn actual_outstanding(&self) -> f64 {
        self.actual - self.paid
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub source: String,
    pub rows: Vec<PredictionRow>,
}

impl PredictionSet {
    pub fn new(source: impl Into<String>, rows: Vec<PredictionRow>) -> Self {
        PredictionSet {
            source: source.into(),
            rows,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, source: impl Into<String>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<PredictionRow>, _>>()?;
        Ok(PredictionSet::new(source, rows))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, e.into())
}

/// Raw case estimates as a prediction set; no correction is applied.
pub fn case_estimates_as_model(observations: &[Observation<'_>]) -> PredictionSet {
    PredictionSet::new(
        CASE_ESTIMATES,
        observations
            .iter()
            .map(|o| PredictionRow::from_observation(o, o.case_estimate_now))
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Unit,
    ClaimSize,
    Ocl,
}

impl Weighting {
    pub const ALL: [Weighting; 3] = [Weighting::Unit, Weighting::ClaimSize, Weighting::Ocl];

    pub fn name(self) -> &'static str {
        match self {
            Weighting::Unit => "unit",
            Weighting::ClaimSize => "claim_size",
            Weighting::Ocl => "ocl",
        }
    }
}

fn check_aligned(a: &PredictionSet, b: &PredictionSet) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Alignment(format!(
            "{} has {} rows, {} has {}",
            a.source,
            a.len(),
            b.source,
            b.len()
        )));
    }
    for (x, y) in a.rows.iter().zip(&b.rows) {
        if x.claim_id != y.claim_id
            || x.prediction_quarter != y.prediction_quarter
            || x.actual != y.actual
        {
            return Err(Error::Alignment(format!(
                "row mismatch at claim {} quarter {}",
                x.claim_id, x.prediction_quarter
            )));
        }
    }
    Ok(())
}

/// Weighted share of observations where the first model's absolute error is
/// strictly smaller than the second's.
pub fn m1_vs_m2(m1: &PredictionSet, m2: &PredictionSet, weighting: Weighting) -> Result<f64> {
    check_aligned(m1, m2)?;
    if m1.is_empty() {
        return Err(Error::Domain("no observations to compare".into()));
    }
    let weight = |r: &PredictionRow| match weighting {
        Weighting::Unit => 1.0,
        Weighting::ClaimSize => r.actual,
        Weighting::Ocl => r.actual_outstanding(),
    };
    let total: f64 = m1.rows.iter().map(weight).sum();
    if total <= 0.0 {
        return Err(Error::Domain(format!(
            "{} weights sum to {total}",
            weighting.name()
        )));
    }
    let wins: f64 = m1
        .rows
        .iter()
        .zip(&m2.rows)
        .filter(|(a, b)| (a.predicted - a.actual).abs() < (b.predicted - b.actual).abs())
        .map(|(a, _)| weight(a))
        .sum();
    Ok(wins / total)
}

fn log_errors(preds: &PredictionSet) -> Result<Vec<f64>> {
    preds
        .rows
        .iter()
        .map(|r| {
            let actual = r.actual_outstanding();
            if actual <= 0.0 {
                return Err(Error::Domain(format!(
                    "claim {} quarter {} has non-positive outstanding {actual}",
                    r.claim_id, r.prediction_quarter
                )));
            }
            let predicted = r.predicted_outstanding();
            Ok(if predicted <= 0.0 {
                actual.ln()
            } else {
                (predicted / actual).ln()
            })
        })
        .collect()
}

fn nonempty(preds: &PredictionSet) -> Result<()> {
    if preds.is_empty() {
        Err(Error::Domain(format!(
            "{} has no observations",
            preds.source
        )))
    } else {
        Ok(())
    }
}

/// Mean absolute log ratio of predicted to actual outstanding.
pub fn male(preds: &PredictionSet) -> Result<f64> {
    nonempty(preds)?;
    let e = log_errors(preds)?;
    Ok(e.iter().map(|v| v.abs()).sum::<f64>() / e.len() as f64)
}

/// Mean squared log ratio of predicted to actual outstanding.
pub fn msle(preds: &PredictionSet) -> Result<f64> {
    nonempty(preds)?;
    let e = log_errors(preds)?;
    Ok(e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64)
}

/// Aggregate predicted over actual outstanding, minus one.
pub fn ocl_err(preds: &PredictionSet) -> Result<f64> {
    let actual: f64 = preds
        .rows
        .iter()
        .map(PredictionRow::actual_outstanding)
        .sum();
    if actual <= 0.0 {
        return Err(Error::Domain(format!(
            "total actual outstanding is {actual}"
        )));
    }
    let predicted: f64 = preds
        .rows
        .iter()
        .map(PredictionRow::predicted_outstanding)
        .sum();
    Ok(predicted / actual - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    AccidentQuarter,
    QuartersSinceNotification,
}

impl GroupKey {
    pub fn name(self) -> &'static str {
        match self {
            GroupKey::AccidentQuarter => "accident_quarter",
            GroupKey::QuartersSinceNotification => "quarters_since_notification",
        }
    }

    fn of(self, r: &PredictionRow) -> i64 {
        match self {
            GroupKey::AccidentQuarter => r.accident_quarter,
            GroupKey::QuartersSinceNotification => r.quarters_since_notification,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub group: i64,
    pub n: usize,
    pub predicted_outstanding: f64,
    pub actual_outstanding: f64,
    /// `Σ(Ŷ−P) / Σ(Y−P)` within the group.
    pub ratio: f64,
    /// Share of all actual outstanding in groups up to and including this one.
    pub cumulative_share: f64,
}

/// Per-group aggregate ratios in ascending group order with the cumulative
/// outstanding curve.
pub fn report_breakdowns(preds: &PredictionSet, key: GroupKey) -> Vec<BreakdownRow> {
    let mut groups: BTreeMap<i64, (usize, f64, f64)> = BTreeMap::new();
    for r in &preds.rows {
        let g = groups.entry(key.of(r)).or_default();
        g.0 += 1;
        g.1 += r.predicted_outstanding();
        g.2 += r.actual_outstanding();
    }
    let total: f64 = groups.values().map(|g| g.2).sum();
    let mut running = 0.0;
    let last = groups.keys().next_back().copied();
    groups
        .into_iter()
        .map(|(group, (n, p, a))| {
            running += a;
            BreakdownRow {
                group,
                n,
                predicted_outstanding: p,
                actual_outstanding: a,
                ratio: p / a,
                cumulative_share: if Some(group) == last {
                    1.0
                } else {
                    running / total
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VsEntry {
    pub opponent: String,
    pub unit: f64,
    pub claim_size: f64,
    pub ocl: f64,
}

impl VsEntry {
    pub fn get(&self, w: Weighting) -> f64 {
        match w {
            Weighting::Unit => self.unit,
            Weighting::ClaimSize => self.claim_size,
            Weighting::Ocl => self.ocl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub source: String,
    pub n: usize,
    pub ocl_err: f64,
    pub male: f64,
    pub msle: f64,
    /// Smearing factor behind the predictions, absent for case estimates.
    pub smearing_b: Option<f64>,
    /// OCLerr of the same predictions before the smearing correction.
    pub ocl_err_uncorrected: Option<f64>,
    pub vs: Vec<VsEntry>,
    pub by_accident_quarter: Vec<BreakdownRow>,
    pub by_quarters_since_notification: Vec<BreakdownRow>,
}

impl MetricsReport {
    /// Scalars and breakdowns for `preds`, and M1vsM2 against each opponent.
    pub fn build(
        preds: &PredictionSet,
        smearing_b: Option<f64>,
        opponents: &[&PredictionSet],
    ) -> Result<Self> {
        let vs = opponents
            .iter()
            .filter(|o| o.source != preds.source)
            .map(|o| {
                Ok(VsEntry {
                    opponent: o.source.clone(),
                    unit: m1_vs_m2(preds, o, Weighting::Unit)?,
                    claim_size: m1_vs_m2(preds, o, Weighting::ClaimSize)?,
                    ocl: m1_vs_m2(preds, o, Weighting::Ocl)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(MetricsReport {
            source: preds.source.clone(),
            n: preds.len(),
            ocl_err: ocl_err(preds)?,
            male: male(preds)?,
            msle: msle(preds)?,
            smearing_b,
            ocl_err_uncorrected: None,
            vs,
            by_accident_quarter: report_breakdowns(preds, GroupKey::AccidentQuarter),
            by_quarters_since_notification: report_breakdowns(
                preds,
                GroupKey::QuartersSinceNotification,
            ),
        })
    }

    pub fn vs(&self, opponent: &str) -> Option<&VsEntry> {
        self.vs.iter().find(|v| v.opponent == opponent)
    }

    /// Writes `<stem>.json` and the two breakdown CSVs next to it.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, serde_json::to_string_pretty(self)?)
            .map_err(|e| Error::io(&json, e))?;
        for (name, rows) in [
            ("accident_quarter", &self.by_accident_quarter),
            (
                "quarters_since_notification",
                &self.by_quarters_since_notification,
            ),
        ] {
            let path = dir.join(format!("{stem}_by_{name}.csv"));
            let mut w = csv::Writer::from_path(&path).map_err(|e| csv_io(&path, e))?;
            for r in rows {
                w.serialize(r)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
    pub datasets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VsSummaryRow {
    pub model: String,
    pub opponent: String,
    pub weighting: Weighting,
    pub mean: f64,
    pub sd: f64,
    pub datasets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub metrics: Vec<SummaryRow>,
    pub vs_table: Vec<VsSummaryRow>,
}

/// Aggregates per-dataset reports. Models and opponents appear in the order
/// of first occurrence.
pub fn summarise(per_dataset: &[Vec<MetricsReport>]) -> Summary {
    let mut models: Vec<String> = Vec::new();
    for r in per_dataset.iter().flatten() {
        if !models.contains(&r.source) {
            models.push(r.source.clone());
        }
    }
    let mut metrics = Vec::new();
    let mut vs_table = Vec::new();
    for model in &models {
        let reports: Vec<&MetricsReport> = per_dataset
            .iter()
            .flatten()
            .filter(|r| &r.source == model)
            .collect();
        let scalars: [(&str, fn(&MetricsReport) -> f64); 4] = [
            ("ocl_err", |r| r.ocl_err),
            ("abs_ocl_err", |r| r.ocl_err.abs()),
            ("male", |r| r.male),
            ("msle", |r| r.msle),
        ];
        for (name, f) in scalars {
            let values: Vec<f64> = reports.iter().map(|r| f(r)).collect();
            push_row(&mut metrics, model, name, &values);
        }
        let uncorrected: Vec<f64> = reports
            .iter()
            .filter_map(|r| r.ocl_err_uncorrected)
            .collect();
        if !uncorrected.is_empty() {
            let abs: Vec<f64> = uncorrected.iter().map(|v| v.abs()).collect();
            push_row(&mut metrics, model, "ocl_err_uncorrected", &uncorrected);
            push_row(&mut metrics, model, "abs_ocl_err_uncorrected", &abs);
        }
        for opponent in &models {
            if opponent == model {
                continue;
            }
            for w in Weighting::ALL {
                let values: Vec<f64> = reports
                    .iter()
                    .filter_map(|r| r.vs(opponent))
                    .map(|v| v.get(w))
                    .collect();
                if values.is_empty() {
                    continue;
                }
                let (mean, sd) = mean_sd(&values);
                vs_table.push(VsSummaryRow {
                    model: model.clone(),
                    opponent: opponent.clone(),
                    weighting: w,
                    mean,
                    sd,
                    datasets: values.len(),
                });
            }
        }
    }
    Summary { metrics, vs_table }
}

fn push_row(rows: &mut Vec<SummaryRow>, model: &str, metric: &str, values: &[f64]) {
    let (mean, sd) = mean_sd(values);
    rows.push(SummaryRow {
        model: model.to_string(),
        metric: metric.to_string(),
        mean,
        sd,
        datasets: values.len(),
    });
}

impl Summary {
    pub fn metric(&self, model: &str, metric: &str) -> Option<&SummaryRow> {
        self.metrics
            .iter()
            .find(|r| r.model == model && r.metric == metric)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("summary.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?)
            .map_err(|e| Error::io(&json, e))?;
        let path = dir.join("summary.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_io(&path, e))?;
        for r in &self.metrics {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let path = dir.join("vs_table.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_io(&path, e))?;
        for r in &self.vs_table {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}
