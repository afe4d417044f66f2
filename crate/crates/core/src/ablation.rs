//! Training-regime ablation: classification-only, stage-wise and multi-task
//! training compared by test mAP, with and without test-time box regression.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::train::{evaluate, train, train_box_head, RunConfig, TrainMode, TrainOutcome};
use crate::{Error, Result};

pub const MIN_SEEDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column {
    /// Trained with `lambda = 0`, no box regression at test time.
    ClsOnly,
    /// Multi-task training, box regression disabled at test time.
    MultitaskNoBbox,
    /// Classification first, then the box head alone.
    StageWise,
    /// Multi-task training with test-time box regression.
    Multitask,
}

impl Column {
    pub const ALL: [Column; 4] = [
        Column::ClsOnly,
        Column::MultitaskNoBbox,
        Column::StageWise,
        Column::Multitask,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Column::ClsOnly => "cls-only",
            Column::MultitaskNoBbox => "multitask-no-bbox",
            Column::StageWise => "stage-wise",
            Column::Multitask => "multitask",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Map(f64),
    Failed(String),
}

impl Cell {
    pub fn map(&self) -> Option<f64> {
        match self {
            Cell::Map(m) => Some(*m),
            Cell::Failed(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRow {
    pub seed: u64,
    pub cells: [Cell; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<SeedRow>,
}

impl AblationReport {
    pub fn cell(&self, row: usize, col: Column) -> &Cell {
        &self.rows[row].cells[col.index()]
    }

    /// Mean over seeds; `None` if any seed failed in this column.
    pub fn mean(&self, col: Column) -> Option<f64> {
        let maps: Option<Vec<f64>> = self
            .rows
            .iter()
            .map(|r| r.cells[col.index()].map())
            .collect();
        maps.filter(|m| !m.is_empty())
            .map(|m| m.iter().sum::<f64>() / m.len() as f64)
    }

    pub fn is_complete(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.cells.iter().all(|c| c.map().is_some()))
    }

    /// Tab-separated table: one row per seed, then the means.
    pub fn format(&self) -> String {
        let mut out = String::from("seed");
        for col in Column::ALL {
            out.push('\t');
            out.push_str(col.label());
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{}", row.seed);
            for cell in &row.cells {
                match cell {
                    Cell::Map(m) => {
                        let _ = write!(out, "\t{m:.4}");
                    }
                    Cell::Failed(_) => out.push_str("\tFAILED"),
                }
            }
            out.push('\n');
        }
        out.push_str("mean");
        for col in Column::ALL {
            match self.mean(col) {
                Some(m) => {
                    let _ = write!(out, "\t{m:.4}");
                }
                None => out.push_str("\tFAILED"),
            }
        }
        out.push('\n');
        for row in &self.rows {
            for (col, cell) in Column::ALL.iter().zip(&row.cells) {
                if let Cell::Failed(msg) = cell {
                    let _ = writeln!(out, "# seed {} {}: {msg}", row.seed, col.label());
                }
            }
        }
        out
    }
}

fn score(run: &RunConfig, outcome: &TrainOutcome, test: &Dataset, use_bbox: bool) -> Result<f64> {
    let cfg = run.detect_config(test.stride, use_bbox);
    Ok(evaluate(&outcome.net, &outcome.normalizer, test, &run.scale, &cfg)?.map)
}

fn failed(e: &Error) -> Cell {
    Cell::Failed(e.to_string())
}

/// Classification-only run, then the stage-wise box head on top of it.
fn piecewise_cells(run: &RunConfig, train_set: &Dataset, test: &Dataset) -> (Cell, Cell) {
    let cls_run = RunConfig {
        mode: TrainMode::ClsOnly,
        ..run.clone()
    };
    let phase1 = match train(&cls_run, train_set) {
        Ok(o) => o,
        Err(e) => return (failed(&e), failed(&e)),
    };
    let cls_only = score(&cls_run, &phase1, test, false).map_or_else(|e| failed(&e), Cell::Map);
    let stage_run = RunConfig {
        mode: TrainMode::StageWise,
        ..run.clone()
    };
    let stage = train_box_head(&stage_run, train_set, phase1)
        .and_then(|o| score(&stage_run, &o, test, true))
        .map_or_else(|e| failed(&e), Cell::Map);
    (cls_only, stage)
}

fn multitask_cells(run: &RunConfig, train_set: &Dataset, test: &Dataset) -> (Cell, Cell) {
    let mt_run = RunConfig {
        mode: TrainMode::Multitask,
        ..run.clone()
    };
    match train(&mt_run, train_set) {
        Ok(o) => (
            score(&mt_run, &o, test, false).map_or_else(|e| failed(&e), Cell::Map),
            score(&mt_run, &o, test, true).map_or_else(|e| failed(&e), Cell::Map),
        ),
        Err(e) => (failed(&e), failed(&e)),
    }
}

/// Trains every regime for every seed and evaluates on `test`.
///
/// Jobs run concurrently on a pool of `threads` workers (`0` = automatic).
/// A failed training run marks its cells as failed instead of aborting.
pub fn run_ablation(
    base: &RunConfig,
    train_set: &Dataset,
    test: &Dataset,
    seeds: &[u64],
    threads: usize,
) -> Result<AblationReport> {
    if seeds.len() < MIN_SEEDS {
        return Err(Error::Config(format!(
            "ablation needs at least {MIN_SEEDS} seeds, got {}",
            seeds.len()
        )));
    }
    base.validate()?;
    let pool = crate::config::thread_pool(threads)?;
    let jobs: Vec<(usize, bool)> = (0..seeds.len())
        .flat_map(|i| [(i, false), (i, true)])
        .collect();
    let results: Vec<(Cell, Cell)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, multitask)| {
                let run = RunConfig {
                    seed: seeds[i],
                    ..base.clone()
                };
                log::info!(
                    "ablation seed {} {}",
                    seeds[i],
                    if multitask {
                        "multitask"
                    } else {
                        "cls-only/stage-wise"
                    }
                );
                if multitask {
                    multitask_cells(&run, train_set, test)
                } else {
                    piecewise_cells(&run, train_set, test)
                }
            })
            .collect()
    });
    let rows = seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| {
            let (cls_only, stage) = results[2 * i].clone();
            let (mt_no_bbox, mt) = results[2 * i + 1].clone();
            SeedRow {
                seed,
                cells: [cls_only, mt_no_bbox, stage, mt],
            }
        })
        .collect();
    Ok(AblationReport { rows })
}
