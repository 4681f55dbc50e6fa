//! Minibatch training with sampled routing and the MI-regularized loss.

use std::io::Write;

use fairmoe_core::data::Dataset;
use fairmoe_core::Error as CoreError;
use fairmoe_core::moe::{GroupStats, RouteMode};
use fairmoe_core::objectives::{estimate_joint, mutual_information, total_loss, LossConfig};
use fairmoe_core::tensor::{no_grad, Tensor, LOG_EPS};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{Model, Routing};
use crate::optim::Optimizer;

const EVAL_CHUNK: usize = 256;

/// Images, labels, groups and ids of a subset of a dataset.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
    pub ids: Vec<u64>,
}

impl Batch {
    pub fn gather(ds: &Dataset, indices: &[usize]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(indices.len() * ds.image_len());
        let (mut labels, mut groups, mut ids) = (Vec::new(), Vec::new(), Vec::new());
        for &i in indices {
            let s = &ds.samples[i];
            pixels.extend_from_slice(&s.image);
            labels.push(s.label);
            groups.push(s.group);
            ids.push(s.id);
        }
        let images = Tensor::new(&[indices.len(), ds.channels, ds.height, ds.width], pixels)?;
        Ok(Self {
            images,
            labels,
            groups,
            ids,
        })
    }

    /// Labels passed to the router: groups for group-label routing.
    pub fn route_labels(&self, mode: RouteMode) -> Option<&[usize]> {
        (mode == RouteMode::GroupLabel).then_some(self.groups.as_slice())
    }
}

/// Routing seed of one optimizer step.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_add(step.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub step: u64,
    pub ce: f64,
    /// `(layer index, mean batch I(C;E))`.
    pub mi: Vec<(usize, f64)>,
    pub total: f64,
    pub acc: f64,
}

pub fn write_log<W: Write>(log: &[EpochLog], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let layers: Vec<usize> = log.first().map(|r| r.mi.iter().map(|(y, _)| *y).collect()).unwrap_or_default();
    let mut header = vec!["step".to_string(), "ce".to_string()];
    header.extend(layers.iter().map(|y| format!("mi_layer{y}")));
    header.extend(["total".to_string(), "acc".to_string()]);
    w.write_record(&header)?;
    for row in log {
        let mut rec = vec![row.step.to_string(), row.ce.to_string()];
        rec.extend(row.mi.iter().map(|(_, v)| v.to_string()));
        rec.extend([row.total.to_string(), row.acc.to_string()]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub stats: GroupStats,
    pub log: Vec<EpochLog>,
    pub checkpoint: Checkpoint,
}

fn check_compatible(cfg: &ExperimentConfig, data: &Dataset) -> Result<()> {
    let m = &cfg.model;
    if data.classes != m.classes || data.channels != m.in_channels {
        return Err(Error::Mismatch(format!(
            "dataset has {} classes and {} channels; model expects {} and {}",
            data.classes, data.channels, m.classes, m.in_channels
        )));
    }
    if m.moe_layers().next().is_some() && m.experts != data.groups {
        return Err(Error::Mismatch(format!("{} experts for {} groups", m.experts, data.groups)));
    }
    Ok(())
}

pub fn train(cfg: &ExperimentConfig, data: &Dataset) -> Result<TrainOutcome> {
    cfg.model.validate()?;
    cfg.train.validate()?;
    check_compatible(cfg, data)?;
    let stats = data.group_stats()?;
    let tc = &cfg.train;
    let model = Model::build(&cfg.model, tc.seed)?;
    let moe_layers = model.moe_layers();
    let loss_cfg = LossConfig {
        w_mi: tc.w_mi,
        eps: LOG_EPS,
        moe_layers: moe_layers.clone(),
    };
    let router_lr = tc.lr * tc.router_lr_scale;
    let mut opt = Optimizer::new(tc.optimizer, model.params(), |name| {
        if name.contains(".router.") {
            router_lr
        } else {
            tc.lr
        }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(tc.epochs);

    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let (mut ce, mut total, mut correct, mut batches) = (0.0, 0.0, 0usize, 0usize);
        let mut mi = vec![0.0; moe_layers.len()];
        for chunk in order.chunks(tc.batch_size) {
            let batch = Batch::gather(data, chunk)?;
            let step = opt.steps();
            let routing = Routing {
                mode: tc.train_routing,
                seed: step_seed(tc.seed, step),
                sample_ids: &batch.ids,
                labels: batch.route_labels(tc.train_routing),
            };
            let out = match model.forward(&batch.images, &stats, &routing) {
                Err(Error::NonFinite { .. } | Error::Core(CoreError::NonFinite { .. })) => {
                    return Err(Error::Divergence { step, loss: f64::NAN })
                }
                other => other?,
            };
            let joints = out
                .routing
                .iter()
                .map(|l| Ok((l.layer_index, estimate_joint(&l.probabilities, &batch.groups, &stats)?)))
                .collect::<Result<Vec<_>>>()?;
            let loss = total_loss(&out.logits, &batch.labels, &joints, &loss_cfg)?;
            let value = loss.total.item();
            if !value.is_finite() {
                return Err(Error::Divergence { step, loss: value });
            }
            model.params().zero_grad();
            loss.total.backward()?;
            opt.step(model.params());
            let finite = model.params().iter().all(|(_, t)| t.data().iter().all(|v| v.is_finite()));
            if !finite {
                return Err(Error::Divergence { step, loss: value });
            }

            ce += loss.cross_entropy;
            total += value;
            for (acc, (_, v)) in mi.iter_mut().zip(&loss.mutual_information) {
                *acc += v;
            }
            correct += predictions(&out.logits).iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
            batches += 1;
        }
        let b = batches as f64;
        log.push(EpochLog {
            epoch,
            step: opt.steps(),
            ce: ce / b,
            mi: moe_layers.iter().zip(&mi).map(|(&y, v)| (y, v / b)).collect(),
            total: total / b,
            acc: correct as f64 / data.len() as f64,
        });
    }

    let checkpoint = Checkpoint::capture(cfg, &model, &stats, opt.steps(), rng.get_word_pos());
    Ok(TrainOutcome {
        model,
        stats,
        log,
        checkpoint,
    })
}

/// Row-wise argmax of `[N, K]` logits, ties to the lowest class.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits.data().chunks(k).map(fairmoe_core::moe::argmax).collect()
}

/// Per-layer selection probabilities and routing records over a whole
/// dataset, computed without recording gradients.
pub fn route_dataset(
    model: &Model,
    stats: &GroupStats,
    data: &Dataset,
    mode: RouteMode,
    seed: u64,
) -> Result<(Vec<usize>, Vec<crate::model::LayerRouting>)> {
    no_grad(|| {
        let mut preds = Vec::with_capacity(data.len());
        let mut layers: Vec<crate::model::LayerRouting> = Vec::new();
        let mut probs: Vec<Vec<f64>> = Vec::new();
        let mut scores: Vec<Vec<f64>> = Vec::new();
        let all: Vec<usize> = (0..data.len()).collect();
        for chunk in all.chunks(EVAL_CHUNK) {
            let batch = Batch::gather(data, chunk)?;
            let routing = Routing {
                mode,
                seed,
                sample_ids: &batch.ids,
                labels: batch.route_labels(mode),
            };
            let out = model.forward(&batch.images, stats, &routing)?;
            preds.extend(predictions(&out.logits));
            if layers.is_empty() {
                probs = vec![Vec::new(); out.routing.len()];
                scores = vec![Vec::new(); out.routing.len()];
                layers = out.routing.clone();
                for l in &mut layers {
                    l.records.clear();
                }
            }
            for (i, l) in out.routing.into_iter().enumerate() {
                probs[i].extend(l.probabilities.to_vec());
                scores[i].extend(l.scores.to_vec());
                layers[i].records.extend(l.records);
            }
        }
        let n = data.len();
        for (i, l) in layers.iter_mut().enumerate() {
            let m = probs[i].len() / n.max(1);
            l.probabilities = Tensor::new(&[n, m], std::mem::take(&mut probs[i]))?;
            l.scores = Tensor::new(&[n, m], std::mem::take(&mut scores[i]))?;
        }
        Ok((preds, layers))
    })
}

/// `I(C; E_Y)` of every MoE layer, estimated on a whole dataset in one batch.
pub fn dataset_mutual_information(
    model: &Model,
    stats: &GroupStats,
    data: &Dataset,
    mode: RouteMode,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let (_, layers) = route_dataset(model, stats, data, mode, seed)?;
    let groups: Vec<usize> = data.samples.iter().map(|s| s.group).collect();
    layers
        .iter()
        .map(|l| {
            let joint = estimate_joint(&l.probabilities, &groups, stats)?;
            Ok((l.layer_index, mutual_information(&joint, LOG_EPS)?.item()))
        })
        .collect()
}
