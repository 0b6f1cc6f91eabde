//! Train, infer and evaluate on a synthetic split; the ablation grid.

use std::time::Instant;

use serde::Serialize;
use ttcloc::evaluator::{self, ground_truth};
use ttcloc::localizer::{infer_dataset, InferenceOptions};
use ttcloc::network::GatingKind;
use ttcloc::objectives::{Aggregator, RegForm, ThresholdSource};
use ttcloc::synth::{generate_split, SynthDataset, SynthSpec};
use ttcloc::trainer::{Strategy, Supervision};
use ttcloc::{run_training, InferenceMode, NetworkParams, Result, TrainConfig};

/// IoU thresholds averaged for the headline number.
pub const AVERAGE_IOUS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];

pub fn inference_options(config: &TrainConfig, mode: InferenceMode) -> InferenceOptions {
    InferenceOptions {
        mode,
        gating: config.gating,
        aggregator: config.loss.aggregator,
        pool_threshold: config.train_localization,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub map: Vec<f64>,
    pub average_map: f64,
    pub map_at_05: f64,
    pub runtime_s: f64,
}

pub fn evaluate_params(
    params: &NetworkParams,
    data: &SynthDataset,
    config: &TrainConfig,
    mode: InferenceMode,
) -> Result<(Vec<f64>, f64)> {
    let dets = infer_dataset(params, &data.test.samples, &inference_options(config, mode))?;
    let report = evaluator::evaluate(
        &dets,
        &ground_truth(&data.test),
        data.test.num_classes(),
        &AVERAGE_IOUS,
    )?;
    Ok((report.map, report.average_map))
}

/// Trains on `data.train` and scores the held-out split.
pub fn run_once(
    data: &SynthDataset,
    config: &TrainConfig,
    mode: InferenceMode,
) -> Result<RunResult> {
    let started = Instant::now();
    let outcome = run_training(&data.train.samples, data.train.num_classes(), config)?;
    let (map, average_map) = evaluate_params(&outcome.state.params, data, config, mode)?;
    Ok(RunResult {
        map_at_05: map[2],
        map,
        average_map,
        runtime_s: started.elapsed().as_secs_f64(),
    })
}

/// One ablation setting.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub group: &'static str,
    pub name: String,
    pub train: TrainConfig,
    pub mode: InferenceMode,
}

/// Train-time localization of the consistency grid. `None` pools with the
/// top-k eighth and never forms a gate during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainLocalization {
    None,
    Manual,
    Predicted,
}

impl TrainLocalization {
    pub fn name(self) -> &'static str {
        match self {
            TrainLocalization::None => "none",
            TrainLocalization::Manual => "manual",
            TrainLocalization::Predicted => "predicted",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            TrainLocalization::None => {
                c.loss.aggregator = Aggregator::TopkEighth;
                c.loss.eta = 0.0;
            }
            TrainLocalization::Manual => c.train_localization = ThresholdSource::Manual,
            TrainLocalization::Predicted => c.train_localization = ThresholdSource::Predicted,
        }
        c
    }
}

pub const CONSISTENCY_PAIRS: [(TrainLocalization, InferenceMode); 4] = [
    (TrainLocalization::None, InferenceMode::Manual),
    (TrainLocalization::Manual, InferenceMode::Manual),
    (TrainLocalization::Predicted, InferenceMode::Manual),
    (TrainLocalization::Predicted, InferenceMode::Predicted),
];

pub const SEMI_ONE: Supervision = Supervision::Semi { k: 1 };

fn with(base: &TrainConfig, f: impl FnOnce(&mut TrainConfig)) -> TrainConfig {
    let mut c = base.clone();
    f(&mut c);
    c
}

/// The 20 cells run per seed: consistency pairs under weak and Semi(1)
/// supervision, then gating functions, regularizer forms, semi-supervised
/// strategies and aggregators, each varied alone from `base`.
pub fn ablation_cells(base: &TrainConfig) -> Vec<Cell> {
    let weak = with(base, |c| c.supervision = Supervision::Weak);
    let semi = with(base, |c| c.supervision = SEMI_ONE);
    let mut cells = Vec::new();
    for sup in [&weak, &semi] {
        for (train, mode) in CONSISTENCY_PAIRS {
            cells.push(Cell {
                group: "consistency",
                name: format!(
                    "{}/{}/{}",
                    train.name(),
                    mode.name(),
                    sup.supervision.name()
                ),
                train: train.apply(sup),
                mode,
            });
        }
    }
    for gating in GatingKind::ALL {
        cells.push(Cell {
            group: "gating",
            name: gating.name().to_string(),
            train: with(&weak, |c| c.gating = gating),
            mode: InferenceMode::Predicted,
        });
    }
    for form in RegForm::ALL {
        cells.push(Cell {
            group: "reg_form",
            name: form.name().to_string(),
            train: with(&weak, |c| c.loss.reg_form = form),
            mode: InferenceMode::Predicted,
        });
    }
    for strategy in Strategy::ALL {
        cells.push(Cell {
            group: "strategy",
            name: strategy.name().to_string(),
            train: with(&semi, |c| c.strategy = strategy),
            mode: InferenceMode::Predicted,
        });
    }
    for aggregator in Aggregator::ALL {
        cells.push(Cell {
            group: "aggregator",
            name: aggregator.name().to_string(),
            train: with(&weak, |c| c.loss.aggregator = aggregator),
            mode: InferenceMode::Predicted,
        });
    }
    cells
}

pub const LAMBDA_SWEEP: [f64; 6] = [0.1, 0.2, 0.4, 0.6, 0.8, 1.0];

pub fn lambda_cells(base: &TrainConfig) -> Vec<Cell> {
    LAMBDA_SWEEP
        .iter()
        .map(|&lambda| Cell {
            group: "lambda",
            name: format!("{lambda}"),
            train: with(base, |c| {
                c.supervision = Supervision::Weak;
                c.loss.lambda = lambda;
            }),
            mode: InferenceMode::Predicted,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub group: String,
    pub cell: String,
    pub seed: u64,
    pub average_map: f64,
    pub map_at_05: f64,
    pub runtime_s: f64,
}

pub fn data_for_seed(spec: &SynthSpec, seed: u64) -> Result<SynthDataset> {
    generate_split(&SynthSpec {
        seed,
        ..spec.clone()
    })
}

/// Runs every cell for every seed. Seed `s` generates the data and drives
/// training. Cells are spread over `threads` workers; results do not depend
/// on the worker count.
pub fn run_grid(
    spec: &SynthSpec,
    cells: &[Cell],
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<AblationRow>> {
    let mut jobs = Vec::new();
    for &seed in seeds {
        let data = data_for_seed(spec, seed)?;
        for cell in cells {
            jobs.push((seed, data.clone(), cell.clone()));
        }
    }
    let run = |(seed, data, cell): &(u64, SynthDataset, Cell)| -> Result<AblationRow> {
        let config = TrainConfig {
            seed: *seed,
            ..cell.train.clone()
        };
        let r = run_once(data, &config, cell.mode)?;
        log::info!(
            "{} {} seed {seed}: avg mAP {:.4}",
            cell.group,
            cell.name,
            r.average_map
        );
        Ok(AblationRow {
            group: cell.group.to_string(),
            cell: cell.name.clone(),
            seed: *seed,
            average_map: r.average_map,
            map_at_05: r.map_at_05,
            runtime_s: r.runtime_s,
        })
    };
    let threads = threads.max(1);
    if threads == 1 {
        return jobs.iter().map(run).collect();
    }
    let chunks: Vec<Vec<(usize, &(u64, SynthDataset, Cell))>> = (0..threads)
        .map(|w| jobs.iter().enumerate().skip(w).step_by(threads).collect())
        .collect();
    let mut slots: Vec<Option<Result<AblationRow>>> = (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .into_iter()
                        .map(|(i, job)| (i, run(job)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// CSV without the runtime column so it is reproducible byte for byte.
pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("group,cell,seed,average_map,map_at_0.5\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            r.group, r.cell, r.seed, r.average_map, r.map_at_05
        ));
    }
    out
}

/// Mean average mAP of one cell across seeds.
pub fn cell_mean(rows: &[AblationRow], group: &str, cell: &str) -> Option<f64> {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.group == group && r.cell == cell)
        .map(|r| r.average_map)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_twenty_cells() {
        let cells = ablation_cells(&TrainConfig::default());
        assert_eq!(cells.len(), 4 * 2 + 3 + 4 + 3 + 2);
        let names: std::collections::BTreeSet<_> =
            cells.iter().map(|c| (c.group, c.name.clone())).collect();
        assert_eq!(names.len(), cells.len());
    }

    #[test]
    fn none_pairs_use_topk_without_localization_loss() {
        let c = TrainLocalization::None.apply(&TrainConfig::default());
        assert_eq!(c.loss.aggregator, Aggregator::TopkEighth);
        assert_eq!(c.loss.eta, 0.0);
    }
}
