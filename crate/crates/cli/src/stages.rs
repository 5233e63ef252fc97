//! Pipeline stages with content-addressed outputs.
//!
//! Every stage directory holds a `stage.json` written after its outputs. Its
//! key hashes the stage's own settings together with the keys of the stages
//! it consumes, so a stage is skipped exactly when nothing upstream changed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use ilr_core::calibration::{apply_correction, fit_smearing_factor, SmearingFactor};
use ilr_core::dataset::{
    assign_splits, assign_splits_naive, build_observations, valuation_slice, Observation, Split,
    SplitMode,
};
use ilr_core::evaluation::{
    case_estimates_as_model, summarise, MetricsReport, PredictionRow, PredictionSet, Summary,
};
use ilr_core::features::{category_levels, NormalisationStats, Variant};
use ilr_core::nn::{train_model, Checkpoint, InputShape};
use ilr_core::rng::derive_seed;
use ilr_core::simulator::{load_transactions, simulate_portfolio, write_transactions, Portfolio};
use ilr_core::tuning::{tune, GridPoint, TuningOptions, TuningResult};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, ModelName};
use crate::error::{CliError, CliResult};

const STAGE_FILE: &str = "stage.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub key: String,
}

/// Counts of stage executions in one invocation (skipped stages excluded).
#[derive(Debug, Default)]
pub struct RunStats {
    pub simulated: AtomicUsize,
    pub prepared: AtomicUsize,
    pub tuned: AtomicUsize,
    pub trained: AtomicUsize,
    pub evaluated: AtomicUsize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RunCounts {
    pub simulated: usize,
    pub prepared: usize,
    pub tuned: usize,
    pub trained: usize,
    pub evaluated: usize,
}

impl RunStats {
    pub fn counts(&self) -> RunCounts {
        RunCounts {
            simulated: self.simulated.load(Ordering::Relaxed),
            prepared: self.prepared.load(Ordering::Relaxed),
            tuned: self.tuned.load(Ordering::Relaxed),
            trained: self.trained.load(Ordering::Relaxed),
            evaluated: self.evaluated.load(Ordering::Relaxed),
        }
    }

    fn bump(counter: &AtomicUsize) {
        counter.fetch_add(1, Ordering::Relaxed);
    }
}

pub fn stage_key(parts: &impl Serialize) -> CliResult<String> {
    let bytes = serde_json::to_vec(parts).map_err(ilr_core::Error::from)?;
    let mut h = Sha256::new();
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    h.update(&bytes);
    Ok(hex::encode(h.finalize()))
}

fn read_record(dir: &Path) -> Option<StageRecord> {
    let text = std::fs::read_to_string(dir.join(STAGE_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

/// Key of a completed upstream stage, or a dependency error naming it.
fn upstream_key(dir: &Path, stage: &'static str) -> CliResult<String> {
    match read_record(dir) {
        Some(r) if r.stage == stage => Ok(r.key),
        _ => Err(CliError::Dependency {
            stage,
            path: dir.join(STAGE_FILE),
        }),
    }
}

fn is_current(dir: &Path, stage: &str, key: &str) -> bool {
    read_record(dir).is_some_and(|r| r.stage == stage && r.key == key)
}

fn mark_complete(dir: &Path, stage: &str, key: &str) -> CliResult<()> {
    let record = StageRecord {
        stage: stage.to_string(),
        key: key.to_string(),
    };
    write_json(&dir.join(STAGE_FILE), &record)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(ilr_core::Error::from)?;
    std::fs::write(path, text + "\n").map_err(|e| ilr_core::Error::io(path, e).into())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| ilr_core::Error::io(path, e))?;
    Ok(serde_json::from_str(&text).map_err(ilr_core::Error::from)?)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| ilr_core::Error::io(dir, e).into())
}

/// Output locations under the experiment directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn dataset(&self, id: u32) -> PathBuf {
        self.root.join("datasets").join(format!("d{id:03}"))
    }

    pub fn transactions(&self, id: u32) -> PathBuf {
        self.dataset(id).join("transactions.csv")
    }

    pub fn split(&self, id: u32) -> PathBuf {
        self.dataset(id).join("split")
    }

    pub fn manifest(&self, id: u32) -> PathBuf {
        self.split(id).join("manifest.csv")
    }

    pub fn tuning(&self, variant: Variant) -> PathBuf {
        self.root.join("tuning").join(variant.slug())
    }

    pub fn model(&self, id: u32, variant: Variant) -> PathBuf {
        self.root
            .join("models")
            .join(format!("d{id:03}"))
            .join(variant.slug())
    }

    pub fn checkpoint(&self, id: u32, variant: Variant) -> PathBuf {
        self.model(id, variant).join("checkpoint.json")
    }

    pub fn evaluation(&self, id: u32, model: ModelName) -> PathBuf {
        self.root
            .join("predictions")
            .join(format!("d{id:03}"))
            .join(model.slug())
    }

    pub fn reports(&self, id: u32) -> PathBuf {
        self.root.join("reports").join(format!("d{id:03}"))
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary")
    }
}

pub struct Context<'a> {
    pub config: &'a ExperimentConfig,
    pub layout: Layout,
    pub stats: RunStats,
}

#[derive(Serialize)]
struct SimulateKey<'a> {
    simulation: &'a ilr_core::simulator::SimulationConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub claims: usize,
    pub transactions: usize,
    pub observations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSummary {
    pub claims: BTreeMap<Split, usize>,
    pub observations: BTreeMap<Split, usize>,
    pub moved: usize,
    pub valuation_observations: usize,
}

impl<'a> Context<'a> {
    pub fn new(config: &'a ExperimentConfig) -> Self {
        Context {
            config,
            layout: Layout::new(&config.out),
            stats: RunStats::default(),
        }
    }

    fn dataset_seed(&self, id: u32, stream: &str) -> u64 {
        derive_seed(self.config.seed, &format!("{stream}/{id}"))
    }

    pub fn simulate(&self, id: u32) -> CliResult<()> {
        self.simulate_inner(id)
            .map_err(|e| e.in_stage("simulate", Some(id)))
    }

    fn simulate_inner(&self, id: u32) -> CliResult<()> {
        let dir = self.layout.dataset(id);
        let mut simulation = self.config.simulation.clone();
        simulation.seed = self.dataset_seed(id, "simulate");
        let key = stage_key(&SimulateKey {
            simulation: &simulation,
        })?;
        if is_current(&dir, "simulate", &key) {
            return Ok(());
        }
        create_dir(&dir)?;
        let portfolio = simulate_portfolio(&simulation)?;
        write_transactions(&portfolio, &self.layout.transactions(id))?;
        let summary = DatasetSummary {
            claims: portfolio.len(),
            transactions: portfolio.iter().map(|c| c.transaction_count()).sum(),
            observations: build_observations(&portfolio).len(),
        };
        write_json(&dir.join("summary.json"), &summary)?;
        mark_complete(&dir, "simulate", &key)?;
        RunStats::bump(&self.stats.simulated);
        Ok(())
    }

    fn load_portfolio(&self, id: u32) -> CliResult<(String, Portfolio)> {
        let key = upstream_key(&self.layout.dataset(id), "simulate")?;
        Ok((key, load_transactions(&self.layout.transactions(id))?))
    }

    pub fn prepare(&self, id: u32) -> CliResult<()> {
        self.prepare_inner(id)
            .map_err(|e| e.in_stage("prepare", Some(id)))
    }

    fn prepare_inner(&self, id: u32) -> CliResult<()> {
        let dir = self.layout.split(id);
        let sim_key = upstream_key(&self.layout.dataset(id), "simulate")?;
        let seed = self.dataset_seed(id, "split");
        let key = stage_key(&("prepare", &sim_key, &self.config.split, seed))?;
        if is_current(&dir, "prepare", &key) {
            return Ok(());
        }
        let (_, portfolio) = self.load_portfolio(id)?;
        let s = &self.config.split;
        let assignment = match s.mode {
            SplitMode::Finalisation => {
                assign_splits(&portfolio, s.boundaries, s.move_fraction, seed)?
            }
            SplitMode::Naive => {
                assign_splits_naive(&portfolio, s.naive_fractions, s.boundaries, seed)?
            }
        };
        create_dir(&dir)?;
        assignment.write_manifest(&self.layout.manifest(id))?;
        let observations = build_observations(&portfolio);
        let mut obs_counts = BTreeMap::new();
        for o in &observations {
            if let Some(split) = assignment.label(o.claim_id()) {
                *obs_counts.entry(split).or_insert(0) += 1;
            }
        }
        let summary = SplitSummary {
            claims: [Split::Train, Split::Validation, Split::Test]
                .into_iter()
                .map(|sp| (sp, assignment.count(sp)))
                .collect(),
            observations: obs_counts,
            moved: assignment.moved.len(),
            valuation_observations: self.test_slice(&observations, &assignment.labels).len(),
        };
        write_json(&dir.join("summary.json"), &summary)?;
        mark_complete(&dir, "prepare", &key)?;
        RunStats::bump(&self.stats.prepared);
        Ok(())
    }

    fn test_slice<'p>(
        &self,
        observations: &[Observation<'p>],
        labels: &BTreeMap<u64, Split>,
    ) -> Vec<Observation<'p>> {
        let q = self.config.split.boundaries.valuation_quarter();
        valuation_slice(observations, q)
            .into_iter()
            .filter(|o| labels.get(&o.claim_id()) == Some(&Split::Test) && o.outstanding() > 0.0)
            .collect()
    }

    /// Portfolio, manifest and the prepare-stage key.
    fn load_prepared(&self, id: u32) -> CliResult<(String, Portfolio, BTreeMap<u64, Split>)> {
        let key = upstream_key(&self.layout.split(id), "prepare")?;
        let (_, portfolio) = self.load_portfolio(id)?;
        let labels = ilr_core::dataset::SplitAssignment::read_manifest(&self.layout.manifest(id))?;
        Ok((key, portfolio, labels))
    }

    fn input_shape(&self, stats: &NormalisationStats) -> InputShape {
        InputShape {
            statics: stats.statics.len(),
            sequence_channels: stats.sequence.len(),
            category_levels: category_levels(),
        }
    }

    pub fn tune(&self, variant: Variant) -> CliResult<()> {
        self.tune_inner(variant)
            .map_err(|e| e.in_stage("tune", Some(self.config.tuning_dataset)))
    }

    fn tune_inner(&self, variant: Variant) -> CliResult<()> {
        let id = self.config.tuning_dataset;
        let dir = self.layout.tuning(variant);
        let prep_key = upstream_key(&self.layout.split(id), "prepare")?;
        let seed = derive_seed(self.config.seed, &format!("tune/{}", variant.slug()));
        let key = stage_key(&(
            "tune",
            &prep_key,
            variant,
            &self.config.grid,
            &self.config.training,
            self.config.tuning_seeds,
            &self.config.features,
            seed,
        ))?;
        if is_current(&dir, "tune", &key) {
            return Ok(());
        }
        let (_, portfolio, labels) = self.load_prepared(id)?;
        let data = EncodedSplits::build(&portfolio, &labels, variant, self.config)?;
        let base = ilr_core::nn::TrainingConfig {
            seed,
            ..self.config.training
        };
        let result = tune(
            &self.config.grid,
            variant,
            &self.input_shape(&data.stats),
            &data.train,
            &data.validation,
            &base,
            TuningOptions {
                workers: self.config.workers,
                seeds: self.config.tuning_seeds,
            },
        )?;
        create_dir(&dir)?;
        result.write_leaderboard(&dir.join("leaderboard.csv"))?;
        write_json(&dir.join("best.json"), &result)?;
        mark_complete(&dir, "tune", &key)?;
        RunStats::bump(&self.stats.tuned);
        Ok(())
    }

    pub fn train(&self, id: u32, variant: Variant) -> CliResult<()> {
        self.train_inner(id, variant)
            .map_err(|e| e.in_stage("train", Some(id)))
    }

    fn train_inner(&self, id: u32, variant: Variant) -> CliResult<()> {
        let dir = self.layout.model(id, variant);
        let prep_key = upstream_key(&self.layout.split(id), "prepare")?;
        let tune_dir = self.layout.tuning(variant);
        let tune_key = upstream_key(&tune_dir, "tune")?;
        let seed = self.dataset_seed(id, &format!("train/{}", variant.slug()));
        let key = stage_key(&("train", &prep_key, &tune_key, seed))?;
        if is_current(&dir, "train", &key) {
            return Ok(());
        }
        let tuning: TuningResult = read_json(&tune_dir.join("best.json"))?;
        let best: GridPoint = tuning.best;
        let (_, portfolio, labels) = self.load_prepared(id)?;
        let data = EncodedSplits::build(&portfolio, &labels, variant, self.config)?;
        let training = best.training_config(&ilr_core::nn::TrainingConfig {
            seed,
            ..self.config.training
        });
        let spec = best.model_spec(variant, self.input_shape(&data.stats));
        let result = train_model(spec, &data.train, &data.validation, &training)?;
        let log_pred: Vec<f64> = result
            .model
            .predict(&data.validation)?
            .into_iter()
            .map(|y| data.stats.to_log_dollars(y))
            .collect();
        let log_actual: Vec<f64> = data.validation_ultimates.iter().map(|u| u.ln()).collect();
        let smearing = fit_smearing_factor(&log_actual, &log_pred, variant.name())?;
        let mut checkpoint = Checkpoint::new(
            &result.model,
            data.stats,
            training.seed,
            result.best_epoch,
            result.best_val_loss,
        );
        checkpoint.smearing = Some(smearing);
        create_dir(&dir)?;
        checkpoint.save(&self.layout.checkpoint(id, variant))?;
        write_json(
            &dir.join("training.json"),
            &TrainingLog {
                grid_point: best,
                train_losses: result.train_losses,
                val_losses: result.val_losses,
                best_epoch: result.best_epoch,
                epochs_run: result.epochs_run,
            },
        )?;
        mark_complete(&dir, "train", &key)?;
        RunStats::bump(&self.stats.trained);
        Ok(())
    }

    pub fn evaluate(&self, id: u32, model: ModelName) -> CliResult<()> {
        self.evaluate_inner(id, model)
            .map_err(|e| e.in_stage("evaluate", Some(id)))
    }

    fn evaluate_inner(&self, id: u32, model: ModelName) -> CliResult<()> {
        let dir = self.layout.evaluation(id, model);
        let upstream = match model {
            ModelName::Network(v) => upstream_key(&self.layout.model(id, v), "train")?,
            ModelName::CaseEstimates => upstream_key(&self.layout.split(id), "prepare")?,
        };
        let key = stage_key(&("evaluate", model, &upstream))?;
        if is_current(&dir, "evaluate", &key) {
            return Ok(());
        }
        let (_, portfolio, labels) = self.load_prepared(id)?;
        let observations = build_observations(&portfolio);
        let slice = self.test_slice(&observations, &labels);
        create_dir(&dir)?;
        match model {
            ModelName::CaseEstimates => {
                case_estimates_as_model(&slice).write_csv(&dir.join("predictions.csv"))?;
            }
            ModelName::Network(v) => {
                let checkpoint = Checkpoint::load(&self.layout.checkpoint(id, v))?;
                let net = checkpoint.model()?;
                let encoded = checkpoint.normalisation.encode_all(&slice)?;
                let log_pred: Vec<f64> = net
                    .predict(&encoded)?
                    .into_iter()
                    .map(|y| checkpoint.normalisation.to_log_dollars(y))
                    .collect();
                let smearing: SmearingFactor = checkpoint.smearing.clone().ok_or_else(|| {
                    ilr_core::Error::config("smearing", "checkpoint has no smearing factor")
                })?;
                let corrected = apply_correction(&log_pred, &smearing);
                let rows = |preds: &[f64]| -> Vec<PredictionRow> {
                    slice
                        .iter()
                        .zip(preds)
                        .map(|(o, p)| PredictionRow::from_observation(o, *p))
                        .collect()
                };
                PredictionSet::new(v.name(), rows(&corrected))
                    .write_csv(&dir.join("predictions.csv"))?;
                let raw: Vec<f64> = log_pred.iter().map(|y| y.exp()).collect();
                PredictionSet::new(v.name(), rows(&raw))
                    .write_csv(&dir.join("predictions_uncorrected.csv"))?;
                write_json(&dir.join("smearing.json"), &smearing)?;
            }
        }
        mark_complete(&dir, "evaluate", &key)?;
        RunStats::bump(&self.stats.evaluated);
        Ok(())
    }

    /// Per-dataset reports and the cross-dataset summary, rebuilt from
    /// stored predictions.
    pub fn report(&self) -> CliResult<Summary> {
        self.report_inner().map_err(|e| e.in_stage("report", None))
    }

    fn report_inner(&self) -> CliResult<Summary> {
        let mut per_dataset = Vec::new();
        for &id in &self.config.evaluation_datasets {
            let mut sets = Vec::new();
            for &model in &self.config.variants {
                let dir = self.layout.evaluation(id, model);
                upstream_key(&dir, "evaluate").map_err(|e| e.in_stage("report", Some(id)))?;
                let preds = PredictionSet::read_csv(&dir.join("predictions.csv"), model.label())?;
                let (b, uncorrected) = match model {
                    ModelName::Network(_) => {
                        let s: SmearingFactor = read_json(&dir.join("smearing.json"))?;
                        let raw = PredictionSet::read_csv(
                            &dir.join("predictions_uncorrected.csv"),
                            model.label(),
                        )?;
                        (Some(s.b), Some(ilr_core::evaluation::ocl_err(&raw)?))
                    }
                    ModelName::CaseEstimates => (None, None),
                };
                sets.push((model, preds, b, uncorrected));
            }
            let all: Vec<&PredictionSet> = sets.iter().map(|s| &s.1).collect();
            let dir = self.layout.reports(id);
            let mut reports = Vec::new();
            for (model, preds, b, uncorrected) in &sets {
                let mut report = MetricsReport::build(preds, *b, &all)?;
                report.ocl_err_uncorrected = *uncorrected;
                report.write(&dir, model.slug())?;
                reports.push(report);
            }
            per_dataset.push(reports);
        }
        let summary = summarise(&per_dataset);
        summary.write(&self.layout.summary())?;
        Ok(summary)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingLog {
    pub grid_point: GridPoint,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Train and validation observations encoded with statistics fitted on the
/// training split.
pub struct EncodedSplits {
    pub stats: NormalisationStats,
    pub train: Vec<ilr_core::features::EncodedObservation>,
    pub validation: Vec<ilr_core::features::EncodedObservation>,
    pub validation_ultimates: Vec<f64>,
}

impl EncodedSplits {
    pub fn build(
        portfolio: &Portfolio,
        labels: &BTreeMap<u64, Split>,
        variant: Variant,
        config: &ExperimentConfig,
    ) -> CliResult<Self> {
        let observations = build_observations(portfolio);
        let pick = |split: Split| -> Vec<Observation<'_>> {
            observations
                .iter()
                .filter(|o| labels.get(&o.claim_id()) == Some(&split))
                .copied()
                .collect()
        };
        let train = pick(Split::Train);
        let validation = pick(Split::Validation);
        let stats = NormalisationStats::fit(&train, variant, config.features)?;
        Ok(EncodedSplits {
            train: stats.encode_all(&train)?,
            validation: stats.encode_all(&validation)?,
            validation_ultimates: validation.iter().map(|o| o.target_ultimate).collect(),
            stats,
        })
    }
}
