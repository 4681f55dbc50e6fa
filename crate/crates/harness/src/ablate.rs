//! Performance as a function of how many trailing conv blocks are MoE layers.

use std::io::Write;

use fairmoe_core::data::Dataset;
use fairmoe_core::metrics::{fate, FairnessGaps, FateScores};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::evaluate::evaluate;
use crate::train::train;

/// Test-set outcome of one training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub avg_f1: f64,
    pub gaps: FairnessGaps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub moe_layers: usize,
    pub seeds: usize,
    pub avg_f1: f64,
    pub eopp0: f64,
    pub eopp1: f64,
    pub eodd: f64,
    /// Against the zero-MoE row; `None` where that row's gap is zero.
    pub fate: FateScores,
}

/// `(count, config)` for every count from 0 to the number of conv blocks,
/// MoE layers added from the last block backward.
pub fn ablation_configs(base: &ExperimentConfig) -> Vec<(usize, ExperimentConfig)> {
    (0..=base.model.blocks.len())
        .map(|count| {
            let mut cfg = base.clone();
            cfg.model = base.model.with_trailing_moe(count);
            (count, cfg)
        })
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

/// Builds the table from an arbitrary runner, called once per `(count, seed)`.
pub fn ablate_with(
    base: &ExperimentConfig,
    seeds: &[u64],
    mut run: impl FnMut(&ExperimentConfig) -> Result<RunSummary>,
) -> Result<Vec<AblationRow>> {
    let mut rows: Vec<AblationRow> = Vec::new();
    for (count, cfg) in ablation_configs(base) {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut c = cfg.clone();
            c.train.seed = seed;
            runs.push(run(&c)?);
        }
        rows.push(AblationRow {
            moe_layers: count,
            seeds: seeds.len(),
            avg_f1: mean(runs.iter().map(|r| r.avg_f1)),
            eopp0: mean(runs.iter().map(|r| r.gaps.eopp0)),
            eopp1: mean(runs.iter().map(|r| r.gaps.eopp1)),
            eodd: mean(runs.iter().map(|r| r.gaps.eodd)),
            fate: FateScores {
                eopp0: None,
                eopp1: None,
                eodd: None,
            },
        });
    }
    let vanilla = rows[0].clone();
    for row in &mut rows {
        row.fate = FateScores {
            eopp0: fate(row.avg_f1, vanilla.avg_f1, row.eopp0, vanilla.eopp0).ok(),
            eopp1: fate(row.avg_f1, vanilla.avg_f1, row.eopp1, vanilla.eopp1).ok(),
            eodd: fate(row.avg_f1, vanilla.avg_f1, row.eodd, vanilla.eodd).ok(),
        };
    }
    Ok(rows)
}

/// Trains and evaluates every `(count, seed)` pair on shared data.
pub fn train_and_summarize(cfg: &ExperimentConfig, train_set: &Dataset, test_set: &Dataset) -> Result<RunSummary> {
    let out = train(cfg, train_set)?;
    let ev = evaluate(&out.model, &out.stats, test_set, cfg.train.infer_routing, cfg.train.seed, None)?;
    Ok(RunSummary {
        avg_f1: ev.report.metrics.avg.f1,
        gaps: ev.report.gaps,
    })
}

pub fn ablate(base: &ExperimentConfig, train_set: &Dataset, test_set: &Dataset, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    ablate_with(base, seeds, |cfg| train_and_summarize(cfg, train_set, test_set))
}

pub fn write_table<W: Write>(rows: &[AblationRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["moe_layers", "seeds", "avg_f1", "eopp0", "eopp1", "eodd", "fate_eopp0", "fate_eopp1", "fate_eodd"])?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    for r in rows {
        w.write_record([
            r.moe_layers.to_string(),
            r.seeds.to_string(),
            r.avg_f1.to_string(),
            r.eopp0.to_string(),
            r.eopp1.to_string(),
            r.eodd.to_string(),
            opt(r.fate.eopp0),
            opt(r.fate.eopp1),
            opt(r.fate.eodd),
        ])?;
    }
    w.flush()?;
    Ok(())
}
