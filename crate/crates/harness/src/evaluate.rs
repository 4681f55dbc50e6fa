//! Inference over a dataset: prediction log, fairness report, routing dump.

use std::io::Write;

use fairmoe_core::data::{Dataset, SynthConfig};
use fairmoe_core::metrics::{BaselineSummary, FairnessReport, Prediction, PredictionLog};
use fairmoe_core::moe::{GroupStats, RouteMode, RoutingRecord};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::route_dataset;

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub log: PredictionLog,
    pub report: FairnessReport,
    /// All MoE layers, layer by layer, samples in dataset order.
    pub routing: Vec<RoutingRecord>,
}

fn check_counts(model: &Model, data: &Dataset) -> Result<()> {
    let cfg = model.config();
    if cfg.classes != data.classes || cfg.in_channels != data.channels {
        return Err(Error::Mismatch(format!(
            "checkpoint expects {} classes and {} channels; dataset has {} and {}",
            cfg.classes, cfg.in_channels, data.classes, data.channels
        )));
    }
    if !model.moe_layers().is_empty() && cfg.experts != data.groups {
        return Err(Error::Mismatch(format!("{} experts for {} groups", cfg.experts, data.groups)));
    }
    Ok(())
}

pub fn predict(
    model: &Model,
    stats: &GroupStats,
    data: &Dataset,
    mode: RouteMode,
    seed: u64,
) -> Result<(PredictionLog, Vec<RoutingRecord>)> {
    check_counts(model, data)?;
    let (preds, layers) = route_dataset(model, stats, data, mode, seed)?;
    let rows = data
        .samples
        .iter()
        .zip(preds)
        .map(|(s, predicted)| Prediction {
            sample_id: s.id,
            truth: s.label,
            predicted,
            group: s.group,
        })
        .collect();
    let routing = layers.into_iter().flat_map(|l| l.records).collect();
    Ok((PredictionLog::new(rows)?, routing))
}

/// Evaluates `model`; with no baseline the report is relative to itself.
pub fn evaluate(
    model: &Model,
    stats: &GroupStats,
    data: &Dataset,
    mode: RouteMode,
    seed: u64,
    baseline: Option<BaselineSummary>,
) -> Result<Evaluation> {
    let (log, routing) = predict(model, stats, data, mode, seed)?;
    let report = FairnessReport::assemble(&log, data.classes, data.groups, baseline)?;
    Ok(Evaluation { log, report, routing })
}

/// Accuracy on samples whose attribute lies in the boundary band; `None`
/// when the band is empty.
pub fn band_accuracy(log: &PredictionLog, data: &Dataset, synth: &SynthConfig) -> Option<f64> {
    let in_band: std::collections::HashSet<u64> =
        data.samples.iter().filter(|s| synth.in_band(s.t)).map(|s| s.id).collect();
    log.filter(|r| in_band.contains(&r.sample_id)).accuracy()
}

pub fn write_routing_csv<W: Write>(records: &[RoutingRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let m = records.first().map_or(0, |r| r.scores.len());
    let mut header: Vec<String> = ["sample_id", "layer_index", "mode", "chosen_expert"].map(String::from).to_vec();
    header.extend((0..m).map(|k| format!("s_{k}")));
    header.extend((0..m).map(|k| format!("p_{k}")));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.sample_id.to_string(),
            r.layer_index.to_string(),
            r.mode.as_str().to_string(),
            r.chosen.to_string(),
        ];
        row.extend(r.scores.iter().chain(&r.probabilities).map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
