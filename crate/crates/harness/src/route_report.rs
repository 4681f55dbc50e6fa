//! Router scores for each group's own expert across network depth.

use std::io::Write;

use fairmoe_core::data::Dataset;
use fairmoe_core::moe::{argmax, GroupStats, RouteMode};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::route_dataset;

/// Which per-expert quantity the report averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Router softmax score `s_k(x)`.
    Score,
    /// Group-size-balanced selection probability.
    Probability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub layer_index: usize,
    pub group: usize,
    /// The expert with the largest `P(E | C = group)` on the training set.
    pub expert: usize,
    pub samples: usize,
    pub mean_score: f64,
}

/// Mean of each group's rows of an `[N, m]` row-major matrix.
fn group_means(values: &[f64], m: usize, groups: &[usize], num_groups: usize) -> Vec<Option<Vec<f64>>> {
    (0..num_groups)
        .map(|g| {
            let rows: Vec<&[f64]> = values.chunks(m).zip(groups).filter(|(_, &gi)| gi == g).map(|(r, _)| r).collect();
            (!rows.is_empty()).then(|| {
                (0..m).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64).collect()
            })
        })
        .collect()
}

/// One row per (MoE layer, group), ordered by depth then group.
pub fn router_depth_report(
    model: &Model,
    stats: &GroupStats,
    train_set: &Dataset,
    test_set: &Dataset,
    kind: ScoreKind,
    mode: RouteMode,
    seed: u64,
) -> Result<Vec<DepthRow>> {
    if model.moe_layers().is_empty() {
        return Err(Error::Mismatch("model has no MoE layers".into()));
    }
    let groups_of = |d: &Dataset| d.samples.iter().map(|s| s.group).collect::<Vec<_>>();
    let (train_groups, test_groups) = (groups_of(train_set), groups_of(test_set));
    let (_, train_layers) = route_dataset(model, stats, train_set, mode, seed)?;
    let (_, test_layers) = route_dataset(model, stats, test_set, mode, seed)?;
    let num_groups = stats.groups();
    let mut rows = Vec::new();
    for (tr, te) in train_layers.iter().zip(&test_layers) {
        let m = tr.probabilities.shape()[1];
        let own: Vec<Option<usize>> = group_means(&tr.probabilities.to_vec(), m, &train_groups, num_groups)
            .into_iter()
            .map(|p| p.map(|p| argmax(&p)))
            .collect();
        let values = match kind {
            ScoreKind::Score => te.scores.to_vec(),
            ScoreKind::Probability => te.probabilities.to_vec(),
        };
        let means = group_means(&values, m, &test_groups, num_groups);
        for g in 0..num_groups {
            let (Some(expert), Some(mean)) = (own[g], &means[g]) else {
                continue;
            };
            rows.push(DepthRow {
                layer_index: tr.layer_index,
                group: g,
                expert,
                samples: test_groups.iter().filter(|&&x| x == g).count(),
                mean_score: mean[expert],
            });
        }
    }
    Ok(rows)
}

pub fn write_report<W: Write>(rows: &[DepthRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
