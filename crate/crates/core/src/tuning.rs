//! Grid search over architecture and optimiser settings, selected by
//! validation loss.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{EncodedObservation, Variant};
use crate::nn::{train_model, InputShape, ModelSpec, TrainingConfig};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxes {
    pub layers: Vec<usize>,
    pub units: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
}

impl GridAxes {
    pub fn size(&self) -> usize {
        self.layers.len() * self.units.len() * self.learning_rates.len() * self.batch_sizes.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpace {
    pub recurrent: GridAxes,
    pub feed_forward: GridAxes,
}

impl GridSpace {
    pub fn paper() -> Self {
        GridSpace {
            recurrent: GridAxes {
                layers: vec![2, 3],
                units: vec![8, 16],
                learning_rates: vec![0.001, 0.01],
                batch_sizes: vec![256, 512],
            },
            feed_forward: GridAxes {
                layers: vec![2, 3, 4],
                units: vec![16, 32],
                learning_rates: vec![0.001, 0.01],
                batch_sizes: vec![512, 1024],
            },
        }
    }

    pub fn axes(&self, variant: Variant) -> &GridAxes {
        if variant.is_recurrent() {
            &self.recurrent
        } else {
            &self.feed_forward
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub layers: usize,
    pub units: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl GridPoint {
    pub fn model_spec(&self, variant: Variant, inputs: InputShape) -> ModelSpec {
        ModelSpec::for_variant(variant, inputs, self.layers, self.units)
    }

    pub fn training_config(&self, base: &TrainingConfig) -> TrainingConfig {
        TrainingConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            ..*base
        }
    }
}

/// Cartesian product in the order layers, units, learning rate, batch size
/// (the last varies fastest).
pub fn enumerate_grid(space: &GridSpace, variant: Variant) -> Vec<GridPoint> {
    let a = space.axes(variant);
    let mut out = Vec::with_capacity(a.size());
    for &layers in &a.layers {
        for &units in &a.units {
            for &learning_rate in &a.learning_rates {
                for &batch_size in &a.batch_sizes {
                    out.push(GridPoint {
                        layers,
                        units,
                        learning_rate,
                        batch_size,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub index: usize,
    pub layers: usize,
    pub units: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub best_epoch: Option<usize>,
    pub epochs_run: Option<usize>,
    /// Mean over seeds of each run's best validation loss.
    pub best_val_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub variant: Variant,
    pub best_index: usize,
    pub best: GridPoint,
    pub leaderboard: Vec<LeaderboardEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningOptions {
    /// Concurrent grid cells; 0 uses the global thread pool.
    pub workers: usize,
    /// Training seeds per cell; losses are averaged.
    pub seeds: usize,
}

impl Default for TuningOptions {
    fn default() -> Self {
        TuningOptions {
            workers: 0,
            seeds: 1,
        }
    }
}

fn run_cell(
    index: usize,
    point: GridPoint,
    variant: Variant,
    inputs: &InputShape,
    train: &[EncodedObservation],
    validation: &[EncodedObservation],
    base: &TrainingConfig,
    seeds: usize,
) -> LeaderboardEntry {
    let mut entry = LeaderboardEntry {
        index,
        layers: point.layers,
        units: point.units,
        learning_rate: point.learning_rate,
        batch_size: point.batch_size,
        best_epoch: None,
        epochs_run: None,
        best_val_loss: None,
        error: None,
    };
    let mut losses = Vec::new();
    for s in 0..seeds.max(1) {
        let mut config = point.training_config(base);
        if s > 0 {
            config.seed = rng::derive_seed(base.seed, &format!("tuning-seed-{s}"));
        }
        match train_model(
            point.model_spec(variant, inputs.clone()),
            train,
            validation,
            &config,
        ) {
            Ok(r) => {
                if s == 0 {
                    entry.best_epoch = Some(r.best_epoch);
                    entry.epochs_run = Some(r.epochs_run);
                }
                losses.push(r.best_val_loss);
            }
            Err(e) => {
                entry.error = Some(e.to_string());
                return entry;
            }
        }
    }
    entry.best_val_loss = Some(losses.iter().sum::<f64>() / losses.len() as f64);
    entry
}

/// Trains every grid cell once (per seed) and picks the lowest validation
/// loss; ties go to the earlier cell. Failed cells are kept in the
/// leaderboard with their error.
pub fn tune(
    space: &GridSpace,
    variant: Variant,
    inputs: &InputShape,
    train: &[EncodedObservation],
    validation: &[EncodedObservation],
    base: &TrainingConfig,
    options: TuningOptions,
) -> Result<TuningResult> {
    let grid = enumerate_grid(space, variant);
    if grid.is_empty() {
        return Err(Error::Tuning(format!("empty grid for {variant}")));
    }
    let run = || -> Vec<LeaderboardEntry> {
        grid.par_iter()
            .enumerate()
            .map(|(i, p)| {
                run_cell(
                    i,
                    *p,
                    variant,
                    inputs,
                    train,
                    validation,
                    base,
                    options.seeds,
                )
            })
            .collect()
    };
    let leaderboard = if options.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(options.workers)
            .build()
            .map_err(|e| Error::Tuning(e.to_string()))?
            .install(run)
    } else {
        run()
    };
    let mut best: Option<(usize, f64)> = None;
    for e in &leaderboard {
        if let Some(loss) = e.best_val_loss {
            if best.is_none_or(|(_, b)| loss < b) {
                best = Some((e.index, loss));
            }
        }
    }
    let Some((best_index, _)) = best else {
        let first = leaderboard
            .iter()
            .find_map(|e| e.error.clone())
            .unwrap_or_default();
        return Err(Error::Tuning(format!(
            "every combination failed for {variant}: {first}"
        )));
    };
    Ok(TuningResult {
        variant,
        best_index,
        best: grid[best_index],
        leaderboard,
    })
}

impl TuningResult {
    pub fn write_leaderboard(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
        for e in &self.leaderboard {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn full_scale_grid_sizes() {
        let space = GridSpace::paper();
        for v in Variant::ALL {
            let n = enumerate_grid(&space, v).len();
            assert_eq!(n, if v.is_recurrent() { 16 } else { 24 });
        }
    }

    #[test]
    fn grid_order_is_deterministic() {
        let g = enumerate_grid(&GridSpace::paper(), Variant::Fnn);
        assert_eq!(
            (g[0].layers, g[0].units, g[0].learning_rate, g[0].batch_size),
            (2, 16, 0.001, 512)
        );
        assert_eq!(g[1].batch_size, 1024);
        assert_eq!(g[23].layers, 4);
    }

    fn singleton(layers: usize) -> GridAxes {
        GridAxes {
            layers: vec![layers],
            units: vec![4],
            learning_rates: vec![0.01],
            batch_sizes: vec![16],
        }
    }

    fn toy(n: usize, seed: u64) -> Vec<EncodedObservation> {
        let mut r = rng::stream(seed, 0);
        (0..n)
            .map(|_| {
                let x: f64 = r.random_range(-1.0..1.0);
                EncodedObservation {
                    statics: vec![x],
                    categories: vec![],
                    sequence: vec![],
                    target: (3.0 * x).abs(),
                }
            })
            .collect()
    }

    fn inputs() -> InputShape {
        InputShape {
            statics: 1,
            sequence_channels: 0,
            category_levels: vec![],
        }
    }

    fn base() -> TrainingConfig {
        TrainingConfig {
            max_epochs: 30,
            patience: 5,
            seed: 3,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn singleton_grid_selects_its_only_cell() {
        let space = GridSpace {
            recurrent: singleton(1),
            feed_forward: singleton(2),
        };
        assert_eq!(enumerate_grid(&space, Variant::Fnn).len(), 1);
        let r = tune(
            &space,
            Variant::Fnn,
            &inputs(),
            &toy(64, 1),
            &toy(32, 2),
            &base(),
            TuningOptions::default(),
        )
        .unwrap();
        assert_eq!(r.best_index, 0);
        assert_eq!(r.leaderboard.len(), 1);
    }

    #[test]
    fn picks_the_model_that_can_fit_a_kink() {
        // |3x| is not representable by a purely linear model (1 dense layer)
        let space = GridSpace {
            recurrent: singleton(1),
            feed_forward: GridAxes {
                layers: vec![1, 3],
                units: vec![16],
                learning_rates: vec![0.01],
                batch_sizes: vec![16],
            },
        };
        let base = TrainingConfig {
            max_epochs: 80,
            patience: 10,
            ..base()
        };
        let r = tune(
            &space,
            Variant::Fnn,
            &inputs(),
            &toy(256, 1),
            &toy(64, 2),
            &base,
            TuningOptions::default(),
        )
        .unwrap();
        assert_eq!(r.best.layers, 3);
        let best = r.leaderboard[r.best_index].best_val_loss.unwrap();
        assert!(r
            .leaderboard
            .iter()
            .all(|e| e.best_val_loss.unwrap() >= best));
    }

    #[test]
    fn failures_are_recorded_and_skipped() {
        let space = GridSpace {
            recurrent: singleton(1),
            feed_forward: GridAxes {
                layers: vec![2],
                units: vec![4],
                learning_rates: vec![0.01],
                batch_sizes: vec![1, 16],
            },
        };
        let r = tune(
            &space,
            Variant::Fnn,
            &inputs(),
            &toy(64, 1),
            &toy(32, 2),
            &base(),
            TuningOptions::default(),
        )
        .unwrap();
        assert!(r.leaderboard[0].error.is_some());
        assert_eq!(r.best_index, 1);

        let all_bad = GridSpace {
            recurrent: singleton(1),
            feed_forward: GridAxes {
                batch_sizes: vec![1],
                ..space.feed_forward.clone()
            },
        };
        assert!(matches!(
            tune(
                &all_bad,
                Variant::Fnn,
                &inputs(),
                &toy(64, 1),
                &toy(32, 2),
                &base(),
                TuningOptions::default()
            ),
            Err(Error::Tuning(_))
        ));
    }

    #[test]
    fn leaderboard_is_reproducible_with_workers() {
        let space = GridSpace {
            recurrent: singleton(1),
            feed_forward: GridAxes {
                layers: vec![2, 3],
                units: vec![4],
                learning_rates: vec![0.01],
                batch_sizes: vec![16],
            },
        };
        let opts = TuningOptions {
            workers: 2,
            seeds: 1,
        };
        let a = tune(
            &space,
            Variant::Fnn,
            &inputs(),
            &toy(64, 1),
            &toy(32, 2),
            &base(),
            opts,
        )
        .unwrap();
        let b = tune(
            &space,
            Variant::Fnn,
            &inputs(),
            &toy(64, 1),
            &toy(32, 2),
            &base(),
            TuningOptions::default(),
        )
        .unwrap();
        assert_eq!(a, b);
    }
}
