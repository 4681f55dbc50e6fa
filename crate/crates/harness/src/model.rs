//! CNN backbone whose flagged conv blocks are mixture-of-experts layers.

use fairmoe_core::moe::{
    he_normal, moe_forward, GroupStats, MoEConvLayer, MoeLayerSpec, RouteContext, RouteMode, RoutingRecord,
};
use fairmoe_core::tensor::{ParamSet, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum Block {
    Conv {
        kernel: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    Moe(MoEConvLayer),
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    blocks: Vec<Block>,
    head_weight: Tensor,
    head_bias: Tensor,
    params: ParamSet,
}

/// Routing inputs for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Routing<'a> {
    pub mode: RouteMode,
    pub seed: u64,
    pub sample_ids: &'a [u64],
    /// Group labels (group-label mode) or expert indices (forced mode).
    pub labels: Option<&'a [usize]>,
}

/// Routing trace of one MoE layer.
#[derive(Debug, Clone)]
pub struct LayerRouting {
    pub layer_index: usize,
    pub scores: Tensor,
    pub probabilities: Tensor,
    pub records: Vec<RoutingRecord>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub routing: Vec<LayerRouting>,
}

impl Model {
    /// Seeded initialization; identical `(config, seed)` give identical parameters.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut blocks = Vec::with_capacity(config.blocks.len());
        let mut c = config.in_channels;
        for (y, b) in config.blocks.iter().enumerate() {
            if b.moe {
                let spec = MoeLayerSpec {
                    layer_index: y,
                    in_channels: c,
                    out_channels: b.channels,
                    kernel_size: b.kernel,
                    stride: b.stride,
                    padding: b.padding,
                    experts: config.experts,
                    router_width: config.router_width,
                };
                let layer = MoEConvLayer::new(spec, &mut rng)?;
                layer.register(&mut params)?;
                blocks.push(Block::Moe(layer));
            } else {
                let shape = [b.channels, c, b.kernel, b.kernel];
                let kernel = Tensor::param(&shape, he_normal(&mut rng, &shape, c * b.kernel * b.kernel))?;
                let bias = Tensor::param(&[b.channels], vec![0.0; b.channels])?;
                params.insert(format!("layer{y}.conv.kernel"), kernel.clone())?;
                params.insert(format!("layer{y}.conv.bias"), bias.clone())?;
                blocks.push(Block::Conv {
                    kernel,
                    bias,
                    stride: b.stride,
                    padding: b.padding,
                });
            }
            c = b.channels;
        }
        let k = config.classes;
        let head_weight = Tensor::param(&[c, k], he_normal(&mut rng, &[c, k], c))?;
        let head_bias = Tensor::param(&[k], vec![0.0; k])?;
        params.insert("head.weight", head_weight.clone())?;
        params.insert("head.bias", head_bias.clone())?;
        Ok(Self {
            config: config.clone(),
            blocks,
            head_weight,
            head_bias,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn moe_layers(&self) -> Vec<usize> {
        self.config.moe_layers().collect()
    }

    /// Overwrites parameter values by path; every path and shape must match.
    pub fn load_values(&self, values: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Mismatch(format!(
                "{} stored parameters for a model with {}",
                values.len(),
                self.params.len()
            )));
        }
        for ((name, shape, data), (want, t)) in values.iter().zip(self.params.iter()) {
            if name != want || shape.as_slice() != t.shape() {
                return Err(Error::Mismatch(format!(
                    "stored parameter {name} {shape:?} does not match {want} {:?}",
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(data);
        }
        Ok(())
    }

    /// `[N, C, H, W]` images to `[N, classes]` logits.
    pub fn forward(&self, x: &Tensor, stats: &GroupStats, routing: &Routing<'_>) -> Result<ForwardOutput> {
        let mut h = x.clone();
        let mut traces = Vec::new();
        for (y, block) in self.blocks.iter().enumerate() {
            if h.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: y });
            }
            h = match block {
                Block::Conv {
                    kernel,
                    bias,
                    stride,
                    padding,
                } => h.conv2d(kernel, bias, *stride, *padding)?,
                Block::Moe(layer) => {
                    let ctx = RouteContext {
                        mode: routing.mode,
                        seed: routing.seed,
                        sample_ids: routing.sample_ids,
                        labels: routing.labels,
                    };
                    let out = moe_forward(&h, layer, stats, &ctx)?;
                    traces.push(LayerRouting {
                        layer_index: layer.layer_index(),
                        scores: out.scores,
                        probabilities: out.probabilities,
                        records: out.records,
                    });
                    out.output
                }
            }
            .relu();
        }
        if h.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: self.blocks.len() });
        }
        let logits = h.global_avg_pool()?.dense(&self.head_weight, &self.head_bias)?;
        Ok(ForwardOutput {
            logits,
            routing: traces,
        })
    }
}
