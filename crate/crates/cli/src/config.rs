//! Experiment configuration and the desk and full-scale profiles.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ilr_core::dataset::{SplitBoundaries, SplitMode};
use ilr_core::features::{FeatureOptions, Variant};
use ilr_core::nn::TrainingConfig;
use ilr_core::simulator::SimulationConfig;
use ilr_core::tuning::GridSpace;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

/// A trained network or the raw case estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelName {
    Network(Variant),
    CaseEstimates,
}

impl ModelName {
    pub const CE_BASELINE: &'static str = "CE-baseline";

    pub fn slug(self) -> &'static str {
        match self {
            ModelName::Network(v) => v.slug(),
            ModelName::CaseEstimates => "ce",
        }
    }

    /// Label used inside metrics reports.
    pub fn label(self) -> &'static str {
        match self {
            ModelName::Network(v) => v.name(),
            ModelName::CaseEstimates => ilr_core::evaluation::CASE_ESTIMATES,
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            ModelName::Network(v) => Some(v),
            ModelName::CaseEstimates => None,
        }
    }
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelName::Network(v) => f.write_str(v.name()),
            ModelName::CaseEstimates => f.write_str(Self::CE_BASELINE),
        }
    }
}

impl FromStr for ModelName {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case(Self::CE_BASELINE) || t.eq_ignore_ascii_case("CE") {
            return Ok(ModelName::CaseEstimates);
        }
        Ok(ModelName::Network(t.parse()?))
    }
}

impl Serialize for ModelName {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn parse_variant_list(list: &str) -> CliResult<Vec<ModelName>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub mode: SplitMode,
    pub boundaries: SplitBoundaries,
    pub move_fraction: f64,
    /// Train/validation/test claim shares for the naive split.
    pub naive_fractions: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    /// Shared by every dataset; each dataset replaces the seed with its own.
    pub simulation: SimulationConfig,
    pub split: SplitConfig,
    pub variants: Vec<ModelName>,
    pub tuning_dataset: u32,
    pub evaluation_datasets: Vec<u32>,
    pub grid: GridSpace,
    pub training: TrainingConfig,
    pub tuning_seeds: usize,
    pub features: FeatureOptions,
    pub workers: usize,
    pub out: PathBuf,
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        let simulation = match profile {
            Profile::Desk => SimulationConfig::desk_scale(),
            Profile::Paper => SimulationConfig::paper_scale(),
        };
        let n_eval = match profile {
            Profile::Desk => 5,
            Profile::Paper => 50,
        };
        ExperimentConfig {
            profile,
            seed: 2024,
            split: SplitConfig {
                mode: SplitMode::Finalisation,
                boundaries: SplitBoundaries::for_quarters(simulation.n_accident_quarters),
                move_fraction: 0.2,
                naive_fractions: [0.6, 0.2, 0.2],
            },
            simulation,
            variants: vec![
                ModelName::Network(Variant::Fnn),
                ModelName::Network(Variant::FnnPlus),
                ModelName::Network(Variant::Lstm),
                ModelName::Network(Variant::LstmPlus),
                ModelName::CaseEstimates,
            ],
            tuning_dataset: 0,
            evaluation_datasets: (1..=n_eval).collect(),
            grid: GridSpace::paper(),
            training: TrainingConfig::default(),
            tuning_seeds: 1,
            features: FeatureOptions::default(),
            workers: 0,
            out: PathBuf::from(match profile {
                Profile::Desk => "runs/desk",
                Profile::Paper => "runs/paper",
            }),
        }
    }

    /// Profile defaults overlaid with the keys present in a JSON document.
    /// A `profile` key in the document selects the base profile.
    pub fn from_json_overlay(text: &str, fallback: Profile) -> CliResult<Self> {
        let overlay: serde_json::Value =
            serde_json::from_str(text).map_err(ilr_core::Error::from)?;
        let profile = match overlay.get("profile") {
            Some(p) => serde_json::from_value(p.clone()).map_err(ilr_core::Error::from)?,
            None => fallback,
        };
        let mut base =
            serde_json::to_value(Self::profile(profile)).map_err(ilr_core::Error::from)?;
        merge(&mut base, overlay);
        let config: ExperimentConfig =
            serde_json::from_value(base).map_err(ilr_core::Error::from)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, fallback: Profile) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ilr_core::Error::io(path, e))?;
        Self::from_json_overlay(&text, fallback)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.simulation.validate()?;
        self.training.validate()?;
        if self.variants.is_empty() {
            return Err(
                ilr_core::Error::config("variants", "at least one model is required").into(),
            );
        }
        if self.evaluation_datasets.is_empty() {
            return Err(ilr_core::Error::config(
                "evaluation_datasets",
                "at least one dataset is required",
            )
            .into());
        }
        if self.split.boundaries.valuation_quarter()
            != i64::from(self.simulation.n_accident_quarters)
        {
            return Err(ilr_core::Error::config(
                "split.boundaries.valuation",
                "valuation quarter must equal the final accident quarter",
            )
            .into());
        }
        let mut seen = std::collections::BTreeSet::new();
        if !self.evaluation_datasets.iter().all(|d| seen.insert(*d)) {
            return Err(
                ilr_core::Error::config("evaluation_datasets", "duplicate dataset id").into(),
            );
        }
        Ok(())
    }

    pub fn networks(&self) -> Vec<Variant> {
        self.variants.iter().filter_map(|m| m.variant()).collect()
    }

    /// Tuning dataset first, then evaluation datasets, without repeats.
    pub fn all_datasets(&self) -> Vec<u32> {
        let mut ids = vec![self.tuning_dataset];
        ids.extend(
            self.evaluation_datasets
                .iter()
                .filter(|d| **d != self.tuning_dataset),
        );
        ids
    }
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
